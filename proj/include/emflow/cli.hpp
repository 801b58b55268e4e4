#pragma once

#include <iosfwd>

namespace emflow::cli {

/// Exit codes: 0 success, 2 usage or validation error, 3 numerical failure.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);
int run(int argc, const char* const* argv);

}  // namespace emflow::cli
