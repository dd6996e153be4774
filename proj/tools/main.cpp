#include <iostream>

#include "pseudoseg/cli.hpp"

int main(int argc, char** argv) { return pseudoseg::cli::run(argc, argv, std::cout, std::cerr); }
