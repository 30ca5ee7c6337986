#include "cbwsdid/cli.hpp"

#include <iostream>

int main(int argc, char** argv) { return cbwsdid::run_cli(argc, argv, std::cout, std::cerr); }
