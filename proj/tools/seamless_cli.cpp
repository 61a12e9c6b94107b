#include "seamless/cli.hpp"

int main(int argc, char** argv) { return seamless::cli::dispatch(argc, argv); }
