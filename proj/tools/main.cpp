#include "hybridsel/cli.hpp"

int main(int argc, char** argv) { return hybridsel::run_cli(argc, argv); }
