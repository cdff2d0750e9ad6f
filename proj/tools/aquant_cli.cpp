#include "aquant/cli.hpp"

int main(int argc, char** argv) { return aquant::cli::main(argc, argv); }
