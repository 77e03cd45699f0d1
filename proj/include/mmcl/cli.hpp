#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace mmcl {

/// Environment variable naming the remote note-generation endpoint.
inline constexpr const char* kNoteEndpointEnv = "MMCL_NOTE_ENDPOINT";

/// Runs one verb (synthesize, preprocess, train, evaluate, index, serve,
/// report). Returns 0 on success, 2 on a usage error and 1 on any other
/// failure, after printing a one-line diagnostic to `err`.
int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int dispatch(int argc, char** argv);

}  // namespace mmcl
