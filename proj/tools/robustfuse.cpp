#include <iostream>

#include "robustfuse/experiment/cli.hpp"

int main(int argc, char** argv) {
  return robustfuse::experiment::cli_main(argc, argv, std::cout, std::cerr);
}
