#include "emflow/cli.hpp"

int main(int argc, char** argv) { return emflow::cli::run(argc, argv); }
