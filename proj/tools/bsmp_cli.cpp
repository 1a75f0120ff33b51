#include "bsmp/cli.hpp"

#include <iostream>

int main(int argc, char** argv) { return bsmp::cli::run_cli(argc, argv, std::cout, std::cerr); }
