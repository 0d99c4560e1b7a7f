// Copyright 2026 The tpfp Authors
// SPDX-License-Identifier: Apache-2.0

#include <iostream>
#include <string>
#include <vector>

#include "tpfp/cli.h"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return tpfp::run_cli(args, std::cout, std::cerr);
}
