// Copyright (c) 2026 diffaug authors
// SPDX-License-Identifier: Apache-2.0
#include "diffaug/ddat.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace diffaug {

namespace {

[[noreturn]] void io_error(const std::string& path, const std::string& msg, uint64_t offset) {
    throw std::runtime_error("ddat: " + path + ": " + msg + " (byte offset " +
                             std::to_string(offset) + ")");
}

void put_u64_le(std::vector<uint8_t>& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(uint8_t(v >> (8 * i)));
}

uint64_t get_u64_le(const uint8_t* p) {
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= uint64_t(p[i]) << (8 * i);
    return v;
}

// Payload scalars on disk are little-endian; swap on big-endian hosts.
void payload_to_le(std::vector<uint8_t>& bytes, size_t elem) {
    if constexpr (std::endian::native == std::endian::little) {
        (void)bytes;
        (void)elem;
    } else {
        for (size_t i = 0; i + elem <= bytes.size(); i += elem)
            for (size_t j = 0; j < elem / 2; ++j) std::swap(bytes[i + j], bytes[i + elem - 1 - j]);
    }
}

}  // namespace

void write_ddat(const std::string& path, const DdatTensor& t) {
    const size_t elem = ddat_elem_size(t.dtype);
    if (elem == 0) throw std::invalid_argument("ddat: unknown dtype code");
    if (t.bytes.size() != t.numel() * elem)
        throw std::invalid_argument("ddat: payload length " + std::to_string(t.bytes.size()) +
                                    " does not match dims (expect " +
                                    std::to_string(t.numel() * elem) + ")");
    if (t.dims.size() > 255) throw std::invalid_argument("ddat: rank exceeds 255");

    std::vector<uint8_t> out;
    out.reserve(8 + t.dims.size() * 8 + t.bytes.size());
    out.insert(out.end(), {'D', 'D', 'A', 'T'});
    out.push_back(1);
    out.push_back(uint8_t(t.dtype));
    out.push_back(uint8_t(t.dims.size()));
    out.push_back(0);
    for (uint64_t d : t.dims) put_u64_le(out, d);
    const size_t payload_at = out.size();
    out.insert(out.end(), t.bytes.begin(), t.bytes.end());
    {
        std::vector<uint8_t> payload(out.begin() + long(payload_at), out.end());
        payload_to_le(payload, elem);
        std::copy(payload.begin(), payload.end(), out.begin() + long(payload_at));
    }

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("ddat: cannot open for write: " + path);
    f.write(reinterpret_cast<const char*>(out.data()), std::streamsize(out.size()));
    if (!f) throw std::runtime_error("ddat: write failed: " + path);
}

DdatTensor read_ddat(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("ddat: cannot open for read: " + path);
    std::vector<uint8_t> buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

    if (buf.size() < 8) io_error(path, "truncated header", buf.size());
    if (std::memcmp(buf.data(), "DDAT", 4) != 0) io_error(path, "bad magic", 0);
    if (buf[4] != 1) io_error(path, "unsupported version " + std::to_string(buf[4]), 4);
    DdatTensor t;
    const uint8_t dtype = buf[5];
    if (dtype < 1 || dtype > 4) io_error(path, "unknown dtype code " + std::to_string(dtype), 5);
    t.dtype = DdatDtype(dtype);
    const size_t rank = buf[6];
    if (buf.size() < 8 + rank * 8) io_error(path, "truncated dims", buf.size());
    t.dims.resize(rank);
    for (size_t i = 0; i < rank; ++i) t.dims[i] = get_u64_le(buf.data() + 8 + i * 8);

    const size_t elem = ddat_elem_size(t.dtype);
    const uint64_t expect = t.numel() * elem;
    const size_t payload_at = 8 + rank * 8;
    if (buf.size() - payload_at != expect)
        io_error(path,
                 "payload length " + std::to_string(buf.size() - payload_at) + " != expected " +
                     std::to_string(expect),
                 payload_at);
    t.bytes.assign(buf.begin() + long(payload_at), buf.end());
    payload_to_le(t.bytes, elem);  // involution: converts back to host order
    return t;
}

uint64_t fnv1a64(const uint8_t* data, size_t n, uint64_t h) {
    for (size_t i = 0; i < n; ++i) {
        h ^= data[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

uint64_t file_hash(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("file_hash: cannot open " + path);
    std::vector<uint8_t> buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return fnv1a64(buf.data(), buf.size());
}

template <typename T>
DdatTensor to_ddat(const ndgrad::Tensor<T>& t) {
    DdatTensor d;
    d.dtype = std::is_same_v<T, float> ? DdatDtype::real32 : DdatDtype::real64;
    for (int64_t x : t.shape()) d.dims.push_back(uint64_t(x));
    d.bytes.resize(t.data().size() * sizeof(T));
    std::memcpy(d.bytes.data(), t.data().data(), d.bytes.size());
    return d;
}

template <typename T>
ndgrad::Tensor<T> from_ddat(const DdatTensor& d) {
    const DdatDtype want = std::is_same_v<T, float> ? DdatDtype::real32 : DdatDtype::real64;
    if (d.dtype != want)
        throw std::runtime_error("ddat: dtype code " + std::to_string(int(d.dtype)) +
                                 " does not match requested scalar type");
    ndgrad::Shape shape;
    for (uint64_t x : d.dims) shape.push_back(int64_t(x));
    std::vector<T> data(size_t(d.numel()));
    std::memcpy(data.data(), d.bytes.data(), d.bytes.size());
    return ndgrad::Tensor<T>::from_data(std::move(shape), std::move(data));
}

template DdatTensor to_ddat<float>(const ndgrad::Tensor<float>&);
template DdatTensor to_ddat<double>(const ndgrad::Tensor<double>&);
template ndgrad::Tensor<float> from_ddat<float>(const DdatTensor&);
template ndgrad::Tensor<double> from_ddat<double>(const DdatTensor&);

DdatTensor labels_to_ddat(const std::vector<int>& labels) {
    DdatTensor d;
    d.dtype = DdatDtype::u32;
    d.dims = {labels.size()};
    d.bytes.resize(labels.size() * 4);
    for (size_t i = 0; i < labels.size(); ++i) {
        const uint32_t v = uint32_t(labels[i]);
        std::memcpy(d.bytes.data() + i * 4, &v, 4);
    }
    return d;
}

std::vector<int> labels_from_ddat(const DdatTensor& d) {
    if (d.dtype != DdatDtype::u32) throw std::runtime_error("ddat: labels must be u32");
    std::vector<int> out(size_t(d.numel()));
    for (size_t i = 0; i < out.size(); ++i) {
        uint32_t v;
        std::memcpy(&v, d.bytes.data() + i * 4, 4);
        out[i] = int(v);
    }
    return out;
}

}  // namespace diffaug
