#include "joadaa/cli.hpp"

int main(int argc, char** argv) { return joadaa::run_cli(argc, argv); }
