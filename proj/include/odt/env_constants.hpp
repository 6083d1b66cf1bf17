#pragma once

// Generated by tools/measure_env_constants. Do not edit by hand.
//
// pointctrl medium sweep (noise sigma -> mean return):
//   1 -> 78.4277
//   2 -> 67.2641
//   3 -> 57.7371
//   4 -> 50.1364
//   5 -> 44.7305
//   6 -> 40.9048
//   7 -> 38.1060
//   8 -> 35.9240
//   10 -> 32.7711
//   12 -> 30.5870
//   15 -> 28.3803
//   20 -> 26.2899
//   30 -> 24.2585
//   50 -> 22.7455
// gridgoal medium sweep (epsilon -> success rate):
//   0.5 -> 1.0000
//   0.6 -> 1.0000
//   0.7 -> 0.9900
//   0.8 -> 0.8900
//   0.85 -> 0.8150
//   0.9 -> 0.6650
//   0.95 -> 0.5250
//   1 -> 0.3000

namespace odt::constants {
inline constexpr double kPointCtrlExpertReturn = 90.873085868586116;
inline constexpr double kPointCtrlRandomReturn = 23.335175474193612;
inline constexpr double kPointCtrlMediumNoise = 12;
inline constexpr double kPointCtrlMediumReturn = 30.5870158409776;
inline constexpr double kGridGoalExpertReturn = 1;
inline constexpr double kGridGoalRandomReturn = 0.38600000000000001;
inline constexpr double kGridGoalMediumEpsilon = 1;
inline constexpr double kGridGoalMediumReturn = 0.29999999999999999;
}  // namespace odt::constants
