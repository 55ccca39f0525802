#include <jointsparse/cli.hpp>

int main(int argc, char** argv) { return jointsparse::run_cli(argc, argv); }
