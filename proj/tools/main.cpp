#include <string>
#include <vector>

#include "malimg/cli.hpp"

int main(int argc, char** argv) {
    return malimg::run_cli(std::vector<std::string>(argv + 1, argv + argc));
}
