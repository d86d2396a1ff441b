#pragma once

#include <bit>
#include <cstdint>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "pfc/error.hpp"
#include "pfc/matrix.hpp"

namespace pfc {

static_assert(std::endian::native == std::endian::little,
              "binary containers are little-endian; big-endian hosts need byte swaps");

class BinaryWriter {
  public:
    explicit BinaryWriter(const std::string& path) : out_(path, std::ios::binary) {
        if (!out_) throw DataError("cannot open for writing: " + path);
        path_ = path;
    }

    template <typename T>
    void put(T value) {
        out_.write(reinterpret_cast<const char*>(&value), sizeof(T));
    }

    template <typename T>
    void put_span(std::span<const T> values) {
        out_.write(reinterpret_cast<const char*>(values.data()),
                   static_cast<std::streamsize>(values.size() * sizeof(T)));
    }

    void put_matrix(const Matrix& m) {
        put<int64_t>(m.rows());
        put<int64_t>(m.cols());
        put_span(m.flat());
    }

    void close() {
        out_.close();
        if (!out_) throw DataError("write failed: " + path_);
    }

  private:
    std::ofstream out_;
    std::string path_;
};

class BinaryReader {
  public:
    explicit BinaryReader(const std::string& path) : in_(path, std::ios::binary), path_(path) {
        if (!in_) throw DataError("cannot open: " + path);
    }

    template <typename T>
    T get() {
        T value{};
        in_.read(reinterpret_cast<char*>(&value), sizeof(T));
        if (!in_) throw DataError("truncated file: " + path_);
        return value;
    }

    template <typename T>
    std::vector<T> get_vector(size_t count) {
        std::vector<T> values(count);
        in_.read(reinterpret_cast<char*>(values.data()),
                 static_cast<std::streamsize>(count * sizeof(T)));
        if (!in_) throw DataError("truncated file: " + path_);
        return values;
    }

    Matrix get_matrix() {
        const auto rows = get<int64_t>();
        const auto cols = get<int64_t>();
        if (rows < 0 || cols < 0 || rows * cols > (1ll << 32)) {
            throw DataError("implausible matrix header in " + path_);
        }
        Matrix m(rows, cols);
        in_.read(reinterpret_cast<char*>(m.flat().data()),
                 static_cast<std::streamsize>(m.flat().size() * sizeof(double)));
        if (!in_) throw DataError("truncated file: " + path_);
        return m;
    }

  private:
    std::ifstream in_;
    std::string path_;
};

} // namespace pfc
