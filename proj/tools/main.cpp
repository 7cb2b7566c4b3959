#include <iostream>

#include "diffattn/cli.hpp"

int main(int argc, char** argv) { return diffattn::run_cli(argc, argv, std::cout, std::cerr); }
