#include "nvnmr/cli.hpp"

int main(int argc, char** argv) { return nvnmr::cli::main(argc, argv); }
