// Regenerates include/odt/env_constants.hpp:
//   measure_env_constants > include/odt/env_constants.hpp

#include <cstdio>
#include <vector>

#include "odt/envs.hpp"

int main() {
  std::vector<odt::CalibrationPoint> point_sweep, grid_sweep;
  const auto c = odt::measure_env_constants(&point_sweep, &grid_sweep);
  std::printf("#pragma once\n\n");
  std::printf("// Generated by tools/measure_env_constants. Do not edit by hand.\n");
  std::printf("//\n// pointctrl medium sweep (noise sigma -> mean return):\n");
  for (const auto& p : point_sweep) std::printf("//   %g -> %.4f\n", p.noise, p.mean_return);
  std::printf("// gridgoal medium sweep (epsilon -> success rate):\n");
  for (const auto& p : grid_sweep) std::printf("//   %g -> %.4f\n", p.noise, p.mean_return);
  std::printf("\nnamespace odt::constants {\n");
  std::printf("inline constexpr double kPointCtrlExpertReturn = %.17g;\n", c.pointctrl_expert);
  std::printf("inline constexpr double kPointCtrlRandomReturn = %.17g;\n", c.pointctrl_random);
  std::printf("inline constexpr double kPointCtrlMediumNoise = %.17g;\n", c.pointctrl_medium.noise);
  std::printf("inline constexpr double kPointCtrlMediumReturn = %.17g;\n", c.pointctrl_medium.mean_return);
  std::printf("inline constexpr double kGridGoalExpertReturn = %.17g;\n", c.gridgoal_expert);
  std::printf("inline constexpr double kGridGoalRandomReturn = %.17g;\n", c.gridgoal_random);
  std::printf("inline constexpr double kGridGoalMediumEpsilon = %.17g;\n", c.gridgoal_medium.noise);
  std::printf("inline constexpr double kGridGoalMediumReturn = %.17g;\n", c.gridgoal_medium.mean_return);
  std::printf("}  // namespace odt::constants\n");
  return 0;
}
