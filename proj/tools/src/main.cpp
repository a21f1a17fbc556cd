#include "seqdef/cli.hpp"

int main(int argc, char** argv) { return seqdef::run_cli(argc, argv); }
