#pragma once

namespace anatgraph {

// Exit codes shared by every subcommand.
inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitIo = 3;
inline constexpr int kExitNumeric = 4;

// Entry point for the `anatgraph` tool: synth, graph, train, extract,
// probe, explain.
int run_cli(int argc, char** argv);

}  // namespace anatgraph
