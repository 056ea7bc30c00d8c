#include "robart/cli.hpp"

int main(int argc, char** argv) { return robart::cli_main(argc, argv); }
