#pragma once

namespace tsa {

#ifdef TSA_SINGLE_PRECISION
using real = float;
#else
using real = double;
#endif

/// Tolerance for finite-difference gradient agreement in the active precision.
inline constexpr double grad_check_tolerance() {
#ifdef TSA_SINGLE_PRECISION
  return 1e-3;
#else
  return 1e-6;
#endif
}

inline constexpr int kReportFormatVersion = 1;
inline constexpr int kWeightsFormatVersion = 1;

}  // namespace tsa
