#include "rlm/cli.hpp"

int main(int argc, char** argv) { return rlm::run_cli(argc, argv); }
