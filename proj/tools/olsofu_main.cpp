// tools/olsofu_main.cpp

#include "olsofu/cli.hpp"

int main(int argc, char** argv) { return olsofu::run_cli(argc, argv); }
