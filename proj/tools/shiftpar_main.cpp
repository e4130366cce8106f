#include <iostream>

#include "shiftpar/cli.h"

int main(int argc, char** argv) {
  return shiftpar::run_cli(argc, argv, std::cout, std::cerr);
}
