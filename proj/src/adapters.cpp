#include "tsa/adapters.hpp"

#include <algorithm>
#include <stdexcept>

namespace tsa {

namespace {

bool contains(const std::vector<int>& v, int x) {
  return std::find(v.begin(), v.end(), x) != v.end();
}

void validate(const AdapterConfig& cfg) {
  if (cfg.form == Form::Decomposed && cfg.connection == Connection::Serial)
    throw std::invalid_argument(
        "adapters: the decomposed form needs the residual connection");
  if (cfg.group_width < 1)
    throw std::invalid_argument("adapters: group width must be positive");
  if (cfg.init_scale < 0)
    throw std::invalid_argument("adapters: negative init scale");
}

int group_count(int out_channels, int group_width) {
  return (out_channels + group_width - 1) / group_width;
}

/// Channelwise residual branches add diag(alpha) x, which only fits when the
/// conv keeps both channel count and spatial extent.
bool channelwise_residual_fits(const LayerSite& s) {
  return s.in_channels == s.out_channels && s.stride == 1;
}

Form resolve_form(const AdapterConfig& cfg, int stage) {
  if (cfg.form == Form::Decomposed && !contains(cfg.decompose_stages, stage))
    return Form::Matrix;
  return cfg.form;
}

Tensor scaled_identity(int rows, int cols, real scale) {
  Tensor t = Tensor::zeros({rows, cols});
  for (int i = 0; i < std::min(rows, cols); ++i)
    t.data()[static_cast<size_t>(i) * cols + i] = scale;
  return t;
}

}  // namespace

std::string AdapterConfig::code() const {
  std::string s = "Ad-";
  s += connection == Connection::Residual ? "R" : "S";
  s += "-";
  switch (form) {
    case Form::Matrix: s += "M"; break;
    case Form::Channelwise: s += "C"; break;
    case Form::Decomposed: s += "DN" + std::to_string(group_width); break;
  }
  if (include_pa) s += "-PA";
  return s;
}

AdapterConfig AdapterConfig::parse(const std::string& code) {
  std::vector<std::string> parts;
  size_t start = 0;
  while (start <= code.size()) {
    const size_t dash = code.find('-', start);
    parts.push_back(code.substr(start, dash == std::string::npos ? dash : dash - start));
    if (dash == std::string::npos) break;
    start = dash + 1;
  }
  auto bad = [&] [[noreturn]] () {
    throw std::invalid_argument("adapters: cannot parse code \"" + code + "\"");
  };
  if (parts.size() < 3 || parts.size() > 4 || parts[0] != "Ad") bad();
  AdapterConfig cfg;
  if (parts[1] == "R")
    cfg.connection = Connection::Residual;
  else if (parts[1] == "S")
    cfg.connection = Connection::Serial;
  else
    bad();
  const std::string& f = parts[2];
  if (f == "M") {
    cfg.form = Form::Matrix;
  } else if (f == "C") {
    cfg.form = Form::Channelwise;
  } else if (f.size() > 2 && f.starts_with("DN")) {
    cfg.form = Form::Decomposed;
    size_t pos = 0;
    int n = 0;
    try {
      n = std::stoi(f.substr(2), &pos);
    } catch (const std::exception&) {
      bad();
    }
    if (pos != f.size() - 2 || n < 1) bad();
    cfg.group_width = n;
  } else {
    bad();
  }
  if (parts.size() == 4) {
    if (parts[3] != "PA") bad();
    cfg.include_pa = true;
  }
  validate(cfg);
  return cfg;
}

Tensor apply_adapter(const AdapterSite& s, const Tensor& input,
                     const Tensor& conv_out) {
  if (s.skipped) return conv_out;
  const int out = s.site.out_channels;
  const bool residual = s.connection == Connection::Residual;
  switch (s.form) {
    case Form::Channelwise:
      if (residual) return add(conv_out, channel_scale(input, s.alpha));
      return channel_scale(conv_out, s.alpha);
    case Form::Matrix: {
      const int in_eff = s.alpha.dim(1);
      Tensor k = reshape(s.alpha, {out, in_eff, 1, 1});
      if (residual) return add(conv_out, conv2d(input, k, s.site.stride, 0));
      return conv2d(conv_out, k, 1, 0);
    }
    case Form::Decomposed: {
      const int in_eff = s.gamma.dim(1);
      Tensor k = reshape(matmul(s.v, s.gamma), {out, in_eff, 1, 1});
      return add(conv_out, conv2d(input, k, s.site.stride, 0));
    }
  }
  throw std::logic_error("apply_adapter: unhandled form");
}

Tensor effective_matrix(const AdapterSite& s) {
  if (s.skipped)
    throw std::invalid_argument("effective_matrix: site " + s.site.tag +
                                " is skipped");
  switch (s.form) {
    case Form::Matrix: return s.alpha;
    case Form::Decomposed: return matmul(s.v, s.gamma);
    case Form::Channelwise: {
      const int out = s.site.out_channels;
      Tensor m = Tensor::zeros({out, out});
      for (int i = 0; i < out; ++i)
        m.data()[static_cast<size_t>(i) * out + i] = s.alpha.data()[static_cast<size_t>(i)];
      return m;
    }
  }
  throw std::logic_error("effective_matrix: unhandled form");
}

int64_t adapter_param_count(const AdapterConfig& cfg, const BackboneSpec& spec) {
  validate(cfg);
  int64_t total = 0;
  for (const LayerSite& ls : enumerate_sites(spec)) {
    if (!contains(cfg.attach_stages, ls.stage)) continue;
    const Form f = resolve_form(cfg, ls.stage);
    const bool residual = cfg.connection == Connection::Residual;
    const int64_t out = ls.out_channels;
    const int64_t in_eff = residual ? ls.in_channels : ls.out_channels;
    switch (f) {
      case Form::Channelwise:
        if (residual && !channelwise_residual_fits(ls)) {
          if (cfg.strict_sites)
            throw std::invalid_argument(
                "adapters: channelwise residual does not fit site " + ls.tag);
          break;
        }
        total += out;
        break;
      case Form::Matrix:
        total += out * in_eff;
        break;
      case Form::Decomposed: {
        const int64_t b = group_count(ls.out_channels, cfg.group_width);
        total += out * b + b * in_eff;
        break;
      }
    }
  }
  if (cfg.include_pa) {
    const int64_t d = spec.feature_dim();
    total += d * d;
  }
  return total;
}

// ---- task model -----------------------------------------------------------------

TaskModel TaskModel::attach(const BackboneWeights& backbone,
                            const AdapterConfig& cfg) {
  validate(cfg);
  TaskModel m;
  m.backbone = backbone;  // tensors alias; nothing here may train them
  m.config = cfg;
  const real delta = cfg.init_scale;
  for (const LayerSite& ls : enumerate_sites(backbone.spec)) {
    if (!contains(cfg.attach_stages, ls.stage)) continue;
    AdapterSite s;
    s.site = ls;
    s.connection = cfg.connection;
    s.form = resolve_form(cfg, ls.stage);
    const bool residual = cfg.connection == Connection::Residual;
    const int out = ls.out_channels;
    const int in_eff = residual ? ls.in_channels : ls.out_channels;
    switch (s.form) {
      case Form::Channelwise:
        if (residual && !channelwise_residual_fits(ls)) {
          if (cfg.strict_sites)
            throw std::invalid_argument(
                "adapters: channelwise residual does not fit site " + ls.tag);
          s.skipped = true;
          break;
        }
        s.alpha = Tensor::full({out}, residual ? delta : real(1), true);
        break;
      case Form::Matrix:
        s.alpha = scaled_identity(out, in_eff, residual ? delta : real(1));
        s.alpha.set_requires_grad(true);
        break;
      case Form::Decomposed: {
        const int b = group_count(out, cfg.group_width);
        s.v = scaled_identity(out, b, delta);
        s.v.set_requires_grad(true);
        s.gamma = scaled_identity(b, in_eff, 1);
        s.gamma.set_requires_grad(true);
        break;
      }
    }
    m.sites.push_back(std::move(s));
  }
  if (cfg.include_pa) {
    const int d = backbone.spec.feature_dim();
    m.beta = scaled_identity(d, d, 1);
    m.beta.set_requires_grad(true);
  }
  return m;
}

ConvHook TaskModel::hook() const {
  const std::vector<AdapterSite>* sites = &this->sites;
  return [sites](const LayerSite& ls, const Tensor& input, const Tensor& conv_out) {
    for (const AdapterSite& s : *sites)
      if (s.site.stage == ls.stage && s.site.block == ls.block &&
          s.site.conv == ls.conv)
        return apply_adapter(s, input, conv_out);
    return conv_out;
  };
}

Tensor TaskModel::embed(const Tensor& images, bool training) {
  Tensor z = forward_features(backbone, images, training, hook());
  if (beta.defined()) z = matmul(z, transpose(beta));
  return z;
}

std::vector<Tensor> TaskModel::site_params() const {
  std::vector<Tensor> out;
  for (const AdapterSite& s : sites) {
    if (s.skipped) continue;
    if (s.form == Form::Decomposed) {
      out.push_back(s.v);
      out.push_back(s.gamma);
    } else {
      out.push_back(s.alpha);
    }
  }
  return out;
}

std::vector<Tensor> TaskModel::trainable() const {
  std::vector<Tensor> out = site_params();
  if (beta.defined()) out.push_back(beta);
  return out;
}

int64_t TaskModel::adapter_parameters() const {
  int64_t total = 0;
  for (const Tensor& t : trainable()) total += t.size();
  return total;
}

}  // namespace tsa
