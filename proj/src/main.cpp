#include <vector>

#include "mpgat/cli.hpp"

int main(int argc, char** argv) {
  return mpgat::run_cli(std::vector<std::string>(argv + 1, argv + argc));
}
