#include "anatgraph/cli.hpp"

int main(int argc, char** argv) { return anatgraph::run_cli(argc, argv); }
