#include <iostream>

#include "rifl/cli.hpp"

int main(int argc, char** argv) {
  return rifl::cli_main(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
