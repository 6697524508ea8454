#include <iostream>

#include "cli.hpp"

int main(int argc, char** argv) { return voxseg::run_cli(argc, argv, std::cout, std::cerr); }
