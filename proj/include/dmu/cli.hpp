// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <iosfwd>

namespace dmu {

/// Entry point of the `dmu` tool. Exit codes: 0 success, 1 runtime failure,
/// 2 usage error (bad flag, unknown cell or task kind, invalid config).
int cli_main(int argc, char** argv);
int cli_main(int argc, char** argv, std::ostream& out, std::ostream& err);

}  // namespace dmu
