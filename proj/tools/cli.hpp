#pragma once
// Command-line front end. Exit codes: 0 success, 2 validation or input
// errors, 3 runtime aborts.

namespace k2m {

inline constexpr int kExitOk = 0;
inline constexpr int kExitValidation = 2;
inline constexpr int kExitRuntime = 3;

int run_cli(int argc, char** argv);

}  // namespace k2m
