#include "kkl/cli/cli.hpp"

int main(int argc, char** argv) { return kkl::cli::run(argc, argv); }
