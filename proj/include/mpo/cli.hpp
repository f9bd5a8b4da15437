#pragma once

#include <string>
#include <vector>

namespace mpo {

/// Runs one CLI invocation. args excludes the program name.
/// Exit codes: 0 success, 1 runtime failure, 2 usage error.
int cli_dispatch(const std::vector<std::string>& args);

}  // namespace mpo
