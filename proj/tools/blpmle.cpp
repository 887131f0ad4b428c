#include "blpmle/cli.hpp"

int main(int argc, char** argv) { return blpmle::run_cli(argc, argv); }
