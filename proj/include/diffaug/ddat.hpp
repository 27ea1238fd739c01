// Copyright (c) 2026 diffaug authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "diffaug/tensor.hpp"

namespace diffaug {

// Single-tensor binary container, little-endian regardless of host:
//   magic "DDAT" | version u8=1 | dtype u8 | rank u8 | reserved u8 |
//   rank x u64 dims | row-major payload
enum class DdatDtype : uint8_t { real32 = 1, real64 = 2, u8 = 3, u32 = 4 };

inline size_t ddat_elem_size(DdatDtype d) {
    switch (d) {
        case DdatDtype::real32: return 4;
        case DdatDtype::real64: return 8;
        case DdatDtype::u8: return 1;
        case DdatDtype::u32: return 4;
    }
    return 0;
}

struct DdatTensor {
    DdatDtype dtype = DdatDtype::real32;
    std::vector<uint64_t> dims;
    std::vector<uint8_t> bytes;

    uint64_t numel() const {
        uint64_t n = 1;
        for (uint64_t d : dims) n *= d;
        return n;
    }
};

void write_ddat(const std::string& path, const DdatTensor& t);
DdatTensor read_ddat(const std::string& path);

uint64_t fnv1a64(const uint8_t* data, size_t n, uint64_t h = 0xcbf29ce484222325ull);
uint64_t file_hash(const std::string& path);

template <typename T>
DdatTensor to_ddat(const ndgrad::Tensor<T>& t);

template <typename T>
ndgrad::Tensor<T> from_ddat(const DdatTensor& d);

DdatTensor labels_to_ddat(const std::vector<int>& labels);
std::vector<int> labels_from_ddat(const DdatTensor& d);

}  // namespace diffaug
