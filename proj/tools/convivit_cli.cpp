#include <iostream>

#include "convivit/cli.hpp"

int main(int argc, char** argv) { return convivit::run_cli(argc, argv, std::cout, std::cerr); }
