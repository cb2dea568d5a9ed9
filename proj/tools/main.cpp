#include "cli.hpp"

int main(int argc, char** argv) { return f2at::cli::run(argc, argv); }
