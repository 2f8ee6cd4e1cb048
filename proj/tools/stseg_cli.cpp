#include "stseg/cli.hpp"

int main(int argc, char** argv) { return stseg::run_cli(argc, argv); }
