#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <string>

namespace slidesurv {

// Compact SHA-1, used for git-style content hashes of input artifacts.
class Sha1 {
public:
    Sha1() { reset(); }

    void reset() {
        state_ = {0x67452301u, 0xEFCDAB89u, 0x98BADCFEu, 0x10325476u, 0xC3D2E1F0u};
        buffer_len_ = 0;
        total_len_ = 0;
    }

    void update(const void* data, std::size_t len) {
        const auto* p = static_cast<const std::uint8_t*>(data);
        total_len_ += len;
        while (len > 0) {
            const std::size_t take = std::min<std::size_t>(64 - buffer_len_, len);
            std::memcpy(buffer_.data() + buffer_len_, p, take);
            buffer_len_ += take;
            p += take;
            len -= take;
            if (buffer_len_ == 64) {
                process_block(buffer_.data());
                buffer_len_ = 0;
            }
        }
    }

    void update(const std::string& s) { update(s.data(), s.size()); }

    std::string hex_digest() {
        const std::uint64_t bit_len = total_len_ * 8;
        const std::uint8_t pad = 0x80;
        update(&pad, 1);
        const std::uint8_t zero = 0;
        while (buffer_len_ != 56) update(&zero, 1);
        std::array<std::uint8_t, 8> len_bytes;
        for (int i = 0; i < 8; ++i)
            len_bytes[static_cast<std::size_t>(i)] =
                static_cast<std::uint8_t>(bit_len >> (56 - 8 * i));
        std::memcpy(buffer_.data() + buffer_len_, len_bytes.data(), 8);
        process_block(buffer_.data());
        static const char* hexd = "0123456789abcdef";
        std::string out;
        out.reserve(40);
        for (std::uint32_t w : state_) {
            for (int i = 28; i >= 0; i -= 4) out.push_back(hexd[(w >> i) & 0xF]);
        }
        return out;
    }

    static std::string hash(const void* data, std::size_t len) {
        Sha1 h;
        h.update(data, len);
        return h.hex_digest();
    }

    static std::string hash(const std::string& s) { return hash(s.data(), s.size()); }

private:
    static std::uint32_t rotl(std::uint32_t x, int n) { return (x << n) | (x >> (32 - n)); }

    void process_block(const std::uint8_t* block) {
        std::array<std::uint32_t, 80> w{};
        for (int i = 0; i < 16; ++i)
            w[static_cast<std::size_t>(i)] =
                (static_cast<std::uint32_t>(block[4 * i]) << 24) |
                (static_cast<std::uint32_t>(block[4 * i + 1]) << 16) |
                (static_cast<std::uint32_t>(block[4 * i + 2]) << 8) |
                static_cast<std::uint32_t>(block[4 * i + 3]);
        for (int i = 16; i < 80; ++i)
            w[static_cast<std::size_t>(i)] =
                rotl(w[static_cast<std::size_t>(i - 3)] ^ w[static_cast<std::size_t>(i - 8)] ^
                         w[static_cast<std::size_t>(i - 14)] ^ w[static_cast<std::size_t>(i - 16)],
                     1);
        std::uint32_t a = state_[0], b = state_[1], c = state_[2], d = state_[3], e = state_[4];
        for (int i = 0; i < 80; ++i) {
            std::uint32_t f, k;
            if (i < 20) {
                f = (b & c) | ((~b) & d);
                k = 0x5A827999u;
            } else if (i < 40) {
                f = b ^ c ^ d;
                k = 0x6ED9EBA1u;
            } else if (i < 60) {
                f = (b & c) | (b & d) | (c & d);
                k = 0x8F1BBCDCu;
            } else {
                f = b ^ c ^ d;
                k = 0xCA62C1D6u;
            }
            const std::uint32_t tmp = rotl(a, 5) + f + e + k + w[static_cast<std::size_t>(i)];
            e = d;
            d = c;
            c = rotl(b, 30);
            b = a;
            a = tmp;
        }
        state_[0] += a;
        state_[1] += b;
        state_[2] += c;
        state_[3] += d;
        state_[4] += e;
    }

    std::array<std::uint32_t, 5> state_;
    std::array<std::uint8_t, 64> buffer_;
    std::size_t buffer_len_ = 0;
    std::uint64_t total_len_ = 0;
};

// Git blob-style content hash: sha1("blob <len>\0" + data).
inline std::string git_blob_hash(const std::string& content) {
    Sha1 h;
    h.update("blob " + std::to_string(content.size()));
    const char nul = '\0';
    h.update(&nul, 1);
    h.update(content);
    return h.hex_digest();
}

}  // namespace slidesurv
