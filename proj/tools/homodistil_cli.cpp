#include <iostream>

#include "homodistil/cli.hpp"

int main(int argc, char** argv) { return homodistil::cli::run(argc, argv, std::cout, std::cerr); }
