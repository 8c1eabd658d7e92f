#include "fscil/cli.hpp"

int main(int argc, char** argv) { return fscil::cli::run_cli(argc, argv); }
