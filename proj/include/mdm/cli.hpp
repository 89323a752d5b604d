#pragma once

#include <iostream>
#include <string>
#include <vector>

namespace mdm {

inline constexpr char kToolVersion[] = "mdm 0.1.0";

// Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.
// args excludes the program name: {"sample", "--ckpt", "...", ...}.
int run_cli(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr);

}  // namespace mdm
