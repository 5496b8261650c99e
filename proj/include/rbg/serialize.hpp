#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <string_view>
#include <vector>

#include "corpus.hpp"
#include "nn.hpp"

namespace rbg {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

/// Appends little-endian primitives to a byte buffer.
class BinaryWriter {
  public:
    void bytes(const void* p, std::size_t n)
    {
        const auto* c = static_cast<const char*>(p);
        m_buf.insert(m_buf.end(), c, c + n);
    }
    void u32(std::uint32_t v) { bytes(&v, sizeof v); }
    void u64(std::uint64_t v) { bytes(&v, sizeof v); }
    void f64(double v) { bytes(&v, sizeof v); }
    void str(std::string_view s)
    {
        u32(static_cast<std::uint32_t>(s.size()));
        bytes(s.data(), s.size());
    }
    void magic(std::string_view m) { bytes(m.data(), m.size()); }

    template <typename T>
    void matrix(const Matrix<T>& m)
    {
        u32(static_cast<std::uint32_t>(m.rows()));
        u32(static_cast<std::uint32_t>(m.cols()));
        for (Eigen::Index i = 0; i < m.size(); ++i) {
            f64(static_cast<double>(m.data()[i]));
        }
    }

    void vocabulary(const Vocabulary& v)
    {
        u32(static_cast<std::uint32_t>(v.size()));
        for (const auto& t : v.tokens()) {
            str(t);
        }
    }

    /// Count, then (name, rows, cols, f64 values) per tensor.
    template <typename T>
    void parameters(const ParameterSet<T>& ps)
    {
        u32(static_cast<std::uint32_t>(ps.size()));
        for (const auto& p : ps) {
            str(p.name);
            matrix(p.value);
        }
    }

    template <typename T>
    void tensors(const ParameterSet<T>& ps, const std::vector<Matrix<T>>& values)
    {
        u32(static_cast<std::uint32_t>(values.size()));
        for (std::size_t i = 0; i < values.size(); ++i) {
            str(ps[i].name);
            matrix(values[i]);
        }
    }

    [[nodiscard]] const std::vector<char>& buffer() const { return m_buf; }

    void save(const std::string& path) const
    {
        std::ofstream out(path, std::ios::binary);
        if (!out) {
            throw DataError("cannot write " + path);
        }
        out.write(m_buf.data(), static_cast<std::streamsize>(m_buf.size()));
    }

  private:
    std::vector<char> m_buf;
};

class BinaryReader {
  public:
    explicit BinaryReader(std::vector<char> buf) : m_buf(std::move(buf)) {}

    static BinaryReader open(const std::string& path)
    {
        std::ifstream in(path, std::ios::binary);
        if (!in) {
            throw DataError("cannot open " + path);
        }
        std::vector<char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        return BinaryReader(std::move(buf));
    }

    void bytes(void* p, std::size_t n)
    {
        if (m_pos + n > m_buf.size()) {
            throw DataError("truncated binary file");
        }
        std::memcpy(p, m_buf.data() + m_pos, n);
        m_pos += n;
    }
    std::uint32_t u32()
    {
        std::uint32_t v = 0;
        bytes(&v, sizeof v);
        return v;
    }
    std::uint64_t u64()
    {
        std::uint64_t v = 0;
        bytes(&v, sizeof v);
        return v;
    }
    double f64()
    {
        double v = 0;
        bytes(&v, sizeof v);
        return v;
    }
    std::string str()
    {
        const auto n = u32();
        std::string s(n, '\0');
        bytes(s.data(), n);
        return s;
    }
    void expect_magic(std::string_view m)
    {
        std::string got(m.size(), '\0');
        bytes(got.data(), got.size());
        if (got != m) {
            throw DataError("bad file magic, expected " + std::string(m));
        }
    }

    template <typename T>
    Matrix<T> matrix()
    {
        const auto rows = u32();
        const auto cols = u32();
        Matrix<T> m(rows, cols);
        for (Eigen::Index i = 0; i < m.size(); ++i) {
            m.data()[i] = static_cast<T>(f64());
        }
        return m;
    }

    Vocabulary vocabulary()
    {
        const auto n = u32();
        std::vector<std::string> toks;
        toks.reserve(n);
        for (std::uint32_t i = 0; i < n; ++i) {
            toks.push_back(str());
        }
        return Vocabulary(std::move(toks));
    }

    /// Reads tensors into an already laid-out set; names and shapes must match.
    template <typename T>
    void parameters_into(ParameterSet<T>& ps)
    {
        auto values = tensors_for(ps);
        for (std::size_t i = 0; i < values.size(); ++i) {
            ps[i].value = std::move(values[i]);
        }
    }

    template <typename T>
    std::vector<Matrix<T>> tensors_for(const ParameterSet<T>& ps)
    {
        const auto n = u32();
        if (n != ps.size()) {
            throw DataError("parameter count mismatch");
        }
        std::vector<Matrix<T>> out;
        out.reserve(n);
        for (std::uint32_t i = 0; i < n; ++i) {
            const auto name = str();
            if (name != ps[i].name) {
                throw DataError("parameter name mismatch: " + name);
            }
            auto m = matrix<T>();
            if (m.rows() != ps[i].value.rows() || m.cols() != ps[i].value.cols()) {
                throw DataError("parameter shape mismatch: " + name);
            }
            out.push_back(std::move(m));
        }
        return out;
    }

    [[nodiscard]] bool at_end() const { return m_pos == m_buf.size(); }

  private:
    std::vector<char> m_buf;
    std::size_t m_pos = 0;
};

inline std::uint64_t file_hash(const std::string& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError("cannot open " + path);
    }
    std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return fnv1a64(data);
}

}  // namespace rbg
