#include "scinet/cli.hpp"

int main(int argc, char** argv) { return scinet::run_cli(argc, argv); }
