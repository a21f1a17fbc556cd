#pragma once

namespace seqdef {

// Parses argv and executes one subcommand (synth, train, embed, squeeze,
// attack, signatures, defend, eval). Returns the process exit status:
// 0 success, 1 usage error, 2 runtime failure.
int run_cli(int argc, const char* const* argv);

}  // namespace seqdef
