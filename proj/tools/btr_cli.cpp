#include "btr/cli.hpp"

int main(int argc, char** argv) {
  btr::tune_allocator();
  return btr::run_cli(argc, argv);
}
