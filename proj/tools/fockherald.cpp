// fockherald command-line entry point.
#include "fockherald/cli.hpp"

int main(int argc, char** argv) { return fockherald::cli::main(argc, argv); }
