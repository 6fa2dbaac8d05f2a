#include <iostream>
#include <string>
#include <vector>

#include "quadd/app.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return quadd::run_cli(args, std::cout, std::cerr);
}
