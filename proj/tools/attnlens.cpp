#include <attnlens/cli.hpp>

#include <iostream>

int main(int argc, char** argv) { return attnlens::cli::run(argc, argv, std::cout, std::cerr); }
