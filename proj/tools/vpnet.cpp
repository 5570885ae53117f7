#include "vpnet/cli.hpp"

int main(int argc, char** argv) { return vpnet::run_cli(argc, argv); }
