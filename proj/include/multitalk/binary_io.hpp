#pragma once

// Little-endian primitive encoding shared by the motion and checkpoint formats.

#include "multitalk/error.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <string>
#include <string_view>

namespace multitalk::binary {

static_assert(std::endian::native == std::endian::little,
              "binary formats assume a little-endian host");

template <typename T>
void put(std::string& out, T value) {
  char buf[sizeof(T)];
  std::memcpy(buf, &value, sizeof(T));
  out.append(buf, sizeof(T));
}

class Reader {
 public:
  explicit Reader(std::string_view data) : data_(data) {}

  template <typename T>
  T get(const char* what) {
    if (remaining() < sizeof(T)) {
      throw FormatError(std::string("truncated while reading ") + what);
    }
    T value;
    std::memcpy(&value, data_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return value;
  }

  std::string_view bytes(std::size_t n, const char* what) {
    if (remaining() < n) throw FormatError(std::string("truncated while reading ") + what);
    auto view = data_.substr(pos_, n);
    pos_ += n;
    return view;
  }

  std::size_t remaining() const { return data_.size() - pos_; }
  std::size_t position() const { return pos_; }

 private:
  std::string_view data_;
  std::size_t pos_ = 0;
};

}  // namespace multitalk::binary
