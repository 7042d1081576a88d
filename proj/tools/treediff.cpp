#include <iostream>

#include "treediff/cli.hpp"

int main(int argc, char** argv) { return treediff::run_cli(argc, argv, std::cout, std::cerr); }
