#include "pscdet/cli.hpp"

int main(int argc, char** argv) { return pscdet::cli::run_cli(argc, argv); }
