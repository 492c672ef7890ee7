#include "wheatnet/cli.hpp"

int main(int argc, char** argv) { return wheatnet::cli::run(argc, argv); }
