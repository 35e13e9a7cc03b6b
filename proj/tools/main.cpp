#include "cli.hpp"

int main(int argc, char** argv) { return k2m::run_cli(argc, argv); }
