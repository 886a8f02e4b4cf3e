#include <iostream>

#include "citelm/cli.hpp"

int main(int argc, char** argv) { return citelm::run_cli(argc, argv, std::cout, std::cerr); }
