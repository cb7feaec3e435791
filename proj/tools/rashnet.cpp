#include <iostream>
#include <string>
#include <vector>

#include "rashnet/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return rashnet::dispatch(args, std::cout, std::cerr);
}
