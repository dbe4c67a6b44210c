// SPDX-License-Identifier: Apache-2.0
//
// Command-line entry point: datagen | train | infer | eval.
// Exit codes: 0 ok, 1 user error, 2 internal error.
#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace memprop::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUser = 1;
inline constexpr int kExitInternal = 2;

/// Environment variable overriding every configured seed.
inline constexpr const char* kSeedEnv = "MEMPROP_MATTE_SEED";

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run(int argc, char** argv);

}  // namespace memprop::cli
