#include <iostream>

#include "least/cli.hpp"

int main(int argc, char** argv) {
  return least::run_cli(argc, argv, std::cout, std::cerr);
}
