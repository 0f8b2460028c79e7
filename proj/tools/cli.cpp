#include "styledem/cli.hpp"

int main(int argc, char** argv) { return styledem::cli::run(argc, argv); }
