#include "cli.hpp"

int main(int argc, char** argv) { return cfx::cli::run_cli(argc, argv); }
