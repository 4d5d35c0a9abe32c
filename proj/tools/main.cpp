// Copyright (c) 2026, The idalign Authors
// SPDX-License-Identifier: Apache-2.0

#include <malloc.h>

#include "idalign/cli.hpp"

int main(int argc, char** argv) {
    // Keep freed tensor buffers in the heap instead of returning them to the OS.
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
    return idalign::dispatch(argc, argv);
}
