#include "mdm/cli.hpp"

int main(int argc, char** argv) { return mdm::run_cli(std::vector<std::string>(argv + 1, argv + argc)); }
