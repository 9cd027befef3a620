// Copyright (c) 2026, The sclab Authors
// SPDX-License-Identifier: Apache-2.0

#include <iostream>

#include "sclab/cli.hpp"

int main(int argc, char** argv) { return sclab::run_cli(argc, argv, std::cout, std::cerr); }
