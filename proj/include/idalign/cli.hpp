// Copyright (c) 2026, The idalign Authors
// SPDX-License-Identifier: Apache-2.0
//
// Subcommand entrypoint. Exit status: 0 success, 1 failed invariant,
// 2 usage or configuration error. Errors are one JSON line on stderr.

#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace idalign {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

/// args excludes the program name.
int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int dispatch(int argc, char** argv);

}  // namespace idalign
