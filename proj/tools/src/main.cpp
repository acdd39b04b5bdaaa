#include <iostream>

#include "moco_cli/cli.hpp"

int main(int argc, char** argv) { return moco::cli::run(argc, argv, std::cout, std::cerr); }
