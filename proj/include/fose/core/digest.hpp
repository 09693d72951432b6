#pragma once

#include <openssl/evp.h>

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace fose {

/// Streaming SHA-256, hex output.
class Sha256 {
 public:
  Sha256() : ctx_(EVP_MD_CTX_new()) {
    if (!ctx_ || EVP_DigestInit_ex(ctx_, EVP_sha256(), nullptr) != 1)
      throw std::runtime_error("sha256: init failed");
  }
  ~Sha256() { EVP_MD_CTX_free(ctx_); }
  Sha256(const Sha256&) = delete;
  Sha256& operator=(const Sha256&) = delete;

  void update(const void* data, size_t len) {
    if (EVP_DigestUpdate(ctx_, data, len) != 1) throw std::runtime_error("sha256: update failed");
  }
  void update(const std::string& s) { update(s.data(), s.size()); }

  std::string hex() {
    unsigned char out[EVP_MAX_MD_SIZE];
    unsigned int n = 0;
    if (EVP_DigestFinal_ex(ctx_, out, &n) != 1) throw std::runtime_error("sha256: final failed");
    static const char* k = "0123456789abcdef";
    std::string h;
    h.reserve(2 * n);
    for (unsigned int i = 0; i < n; ++i) {
      h.push_back(k[out[i] >> 4]);
      h.push_back(k[out[i] & 0xf]);
    }
    return h;
  }

 private:
  EVP_MD_CTX* ctx_;
};

inline std::string sha256_hex(const std::string& s) {
  Sha256 d;
  d.update(s);
  return d.hex();
}

}  // namespace fose
