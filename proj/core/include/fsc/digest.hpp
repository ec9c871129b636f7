#pragma once

// Minimal SHA-256 (FIPS 180-4), used for config hashes and update audits.

#include <cstddef>
#include <cstdint>
#include <string>

namespace fsc {

class Sha256 {
  public:
    Sha256();
    void update(const uint8_t* data, size_t len);
    void update(const std::string& s);
    std::string hex();  // finalizes; object must not be reused afterwards

  private:
    void process_block(const uint8_t* p);
    uint32_t h_[8];
    uint8_t buf_[64];
    size_t buf_len_ = 0;
    uint64_t total_ = 0;
};

std::string sha256_hex(const std::string& data);

}  // namespace fsc
