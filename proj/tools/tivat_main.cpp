#include <iostream>
#include <string>
#include <vector>

#include "tivat/cli.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return tivat::cli_run(args, std::cout, std::cerr);
}
