#include "rlm/cli.hpp"

int main(int argc, char** argv) { return rlm::run_command(argc, argv); }
