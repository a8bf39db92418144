#include "qdtune/cli.hpp"

#include <iostream>

int main(int argc, char** argv) { return qdtune::cli::run(argc, argv, std::cout, std::cerr); }
