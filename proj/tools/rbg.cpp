#include "rbg/cli.hpp"

int main(int argc, char** argv) { return rbg::cli::run(argc, argv); }
