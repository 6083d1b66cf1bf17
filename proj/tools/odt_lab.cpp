#include "odt/cli.hpp"
#include "odt/runtime.hpp"

int main(int argc, char** argv) {
  odt::configure_allocator();
  return odt::cli::run(argc, argv);
}
