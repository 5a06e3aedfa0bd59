// BICL1 checkpoint layout (all integers u32 little-endian, floats IEEE-754
// binary32 little-endian):
//
//   "BICL1"
//   header_len
//   header:  n_layers n_heads d_model d_head d_ff vocab_size max_positions
//            position_kind flags(bit0 = linear mode)
//            token_count { byte_len bytes }*
//   tensor_count
//   { name_len name rank dims[rank] data[product(dims)] }*   canonical order
//
// Nothing else is written, so two saves of the same checkpoint are
// byte-identical.

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include "bicl/errors.hpp"
#include "bicl/model.hpp"

namespace bicl {

namespace {

constexpr std::array<char, 5> kMagic{'B', 'I', 'C', 'L', '1'};
constexpr std::uint32_t kFlagLinear = 1u;

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

class Writer {
public:
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xffu));
    }
    void f32(float f) { u32(std::bit_cast<std::uint32_t>(f)); }
    void bytes(const void* p, std::size_t n) {
        const auto* b = static_cast<const std::uint8_t*>(p);
        buf_.insert(buf_.end(), b, b + n);
    }
    void str(const std::string& s) {
        u32(static_cast<std::uint32_t>(s.size()));
        bytes(s.data(), s.size());
    }
    std::vector<std::uint8_t>& buffer() { return buf_; }

private:
    std::vector<std::uint8_t> buf_;
};

class Reader {
public:
    explicit Reader(std::span<const std::uint8_t> b) : b_(b) {}

    bool has(std::size_t n) const { return b_.size() - pos_ >= n; }
    std::size_t remaining() const { return b_.size() - pos_; }

    std::uint32_t u32(const std::string& ctx) {
        need(4, ctx);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b_[pos_ + i]) << (8 * i);
        pos_ += 4;
        return v;
    }
    std::string str(const std::string& ctx) {
        const std::uint32_t n = u32(ctx);
        need(n, ctx);
        std::string s(reinterpret_cast<const char*>(b_.data() + pos_), n);
        pos_ += n;
        return s;
    }
    void floats(std::span<float> out, const std::string& ctx) {
        need(out.size() * 4, ctx);
        for (float& f : out) {
            std::uint32_t v = 0;
            for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b_[pos_ + i]) << (8 * i);
            f = std::bit_cast<float>(v);
            pos_ += 4;
        }
    }
    void need(std::size_t n, const std::string& ctx) const {
        if (!has(n)) throw LoadError("file truncated while reading " + ctx);
    }
    std::size_t pos() const { return pos_; }

private:
    std::span<const std::uint8_t> b_;
    std::size_t pos_ = 0;
};

std::uint32_t to_u32(std::size_t v, const char* what) {
    if (v > 0xffffffffu) throw IoError(std::string("value too large for checkpoint field ") + what);
    return static_cast<std::uint32_t>(v);
}

}  // namespace

std::vector<std::uint8_t> serialize_checkpoint(const ModelCheckpoint& ckpt) {
    ckpt.validate();
    const ModelConfig& c = ckpt.config;

    Writer header;
    for (std::size_t v : {c.n_layers, c.n_heads, c.d_model, c.d_head, c.d_ff, c.vocab_size, c.max_positions})
        header.u32(to_u32(v, "config"));
    header.u32(static_cast<std::uint32_t>(c.position_kind));
    header.u32(c.linear_mode ? kFlagLinear : 0u);
    header.u32(to_u32(ckpt.tokenizer.size(), "token_count"));
    for (const std::string& tok : ckpt.tokenizer.table()) header.str(tok);

    Writer out;
    out.bytes(kMagic.data(), kMagic.size());
    out.u32(to_u32(header.buffer().size(), "header_len"));
    out.bytes(header.buffer().data(), header.buffer().size());

    std::uint32_t count = 0;
    for_each_tensor(ckpt.weights, [&](const std::string&, const Tensor&) { ++count; });
    out.u32(count);
    for_each_tensor(ckpt.weights, [&](const std::string& name, const Tensor& t) {
        out.str(name);
        out.u32(to_u32(t.rank(), "rank"));
        for (std::size_t dim : t.shape()) out.u32(to_u32(dim, "dim"));
        for (float f : t.data()) out.f32(f);
    });
    return std::move(out.buffer());
}

ModelCheckpoint deserialize_checkpoint(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < kMagic.size() || std::memcmp(bytes.data(), kMagic.data(), kMagic.size()) != 0) {
        throw LoadError("bad magic: not a BICL1 checkpoint");
    }
    Reader r(bytes.subspan(kMagic.size()));
    const std::uint32_t header_len = r.u32("header length");
    r.need(header_len, "header");
    const std::size_t header_end = r.pos() + header_len;

    ModelCheckpoint ckpt;
    ModelConfig& c = ckpt.config;
    c.n_layers = r.u32("config");
    c.n_heads = r.u32("config");
    c.d_model = r.u32("config");
    c.d_head = r.u32("config");
    c.d_ff = r.u32("config");
    c.vocab_size = r.u32("config");
    c.max_positions = r.u32("config");
    const std::uint32_t pos_kind = r.u32("config");
    if (pos_kind != static_cast<std::uint32_t>(PositionKind::LearnedAbsolute)) {
        throw LoadError("unsupported position kind " + std::to_string(pos_kind));
    }
    c.position_kind = PositionKind::LearnedAbsolute;
    const std::uint32_t flags = r.u32("config");
    if (flags & ~kFlagLinear) throw LoadError("unknown header flags");
    c.linear_mode = (flags & kFlagLinear) != 0;
    try {
        c.validate();
    } catch (const ConfigError& e) {
        throw LoadError(e.what());
    }

    const std::uint32_t n_tokens = r.u32("tokenizer table");
    std::vector<std::string> table;
    table.reserve(std::min<std::uint32_t>(n_tokens, 1u << 20));
    for (std::uint32_t i = 0; i < n_tokens; ++i) table.push_back(r.str("tokenizer table"));
    if (r.pos() != header_end) throw LoadError("header length does not match header contents");
    ckpt.tokenizer = Tokenizer(std::move(table));

    ckpt.weights = make_weights(c);
    const auto expected = expected_tensors(c);
    const std::uint32_t n_tensors = r.u32("tensor count");
    if (n_tensors != expected.size()) {
        throw LoadError("checkpoint declares " + std::to_string(n_tensors) + " tensors, expected " +
                        std::to_string(expected.size()));
    }
    std::size_t i = 0;
    for_each_tensor(ckpt.weights, [&](const std::string& name, Tensor& t) {
        const std::string ctx = "tensor '" + name + "'";
        const std::string stored = r.str(ctx);
        if (stored != name) throw LoadError("expected tensor '" + name + "', found '" + stored + "'");
        const std::uint32_t rank = r.u32(ctx);
        if (rank > 8) throw LoadError(ctx + " has implausible rank " + std::to_string(rank));
        std::vector<std::size_t> dims(rank);
        for (auto& dim : dims) dim = r.u32(ctx);
        if (dims != expected[i].second) {
            throw LoadError(ctx + " has shape " + Tensor(dims).shape_string() + ", expected " +
                            Tensor(expected[i].second).shape_string());
        }
        r.floats(t.data(), ctx);
        if (!t.all_finite()) throw LoadError(ctx + " contains non-finite values");
        ++i;
    });
    if (r.remaining() != 0) throw LoadError("trailing bytes after last tensor");
    ckpt.validate();
    return ckpt;
}

void save_checkpoint(const ModelCheckpoint& ckpt, const std::filesystem::path& path) {
    const std::vector<std::uint8_t> bytes = serialize_checkpoint(ckpt);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) throw IoError("write failed for '" + path.string() + "'");
}

ModelCheckpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw LoadError("cannot open checkpoint '" + path.string() + "'");
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return deserialize_checkpoint(bytes);
}

void write_golden_logits(const std::filesystem::path& path, std::span<const GoldenRecord> records) {
    Writer out;
    out.u32(to_u32(records.size(), "count"));
    for (const GoldenRecord& r : records) {
        out.u32(to_u32(r.ids.size(), "id_count"));
        for (TokenId id : r.ids) out.u32(to_u32(id, "token id"));
        for (float f : r.logits) out.f32(f);
    }
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open '" + path.string() + "' for writing");
    f.write(reinterpret_cast<const char*>(out.buffer().data()), static_cast<std::streamsize>(out.buffer().size()));
    if (!f) throw IoError("write failed for '" + path.string() + "'");
}

std::vector<GoldenRecord> read_golden_logits(const std::filesystem::path& path, std::size_t vocab_size) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw LoadError("cannot open golden logits '" + path.string() + "'");
    const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    Reader r(bytes);
    std::vector<GoldenRecord> records(r.u32("golden count"));
    for (std::size_t i = 0; i < records.size(); ++i) {
        const std::string ctx = "golden prompt " + std::to_string(i);
        records[i].ids.resize(r.u32(ctx));
        for (TokenId& id : records[i].ids) id = r.u32(ctx);
        records[i].logits.resize(vocab_size);
        r.floats(records[i].logits, ctx);
    }
    if (r.remaining() != 0) throw LoadError("trailing bytes in golden logits '" + path.string() + "'");
    return records;
}

GoldenComparison compare_golden_logits(const ModelCheckpoint& ckpt, std::span<const GoldenRecord> records) {
    GoldenComparison cmp;
    for (const GoldenRecord& rec : records) {
        if (rec.logits.size() != ckpt.config.vocab_size)
            throw DimensionError("golden logits have " + std::to_string(rec.logits.size()) + " entries, vocab is " +
                                 std::to_string(ckpt.config.vocab_size));
        const ForwardResult out = forward(ckpt, rec.ids);
        const auto ours = out.final_logits();
        for (std::size_t v = 0; v < ours.size(); ++v)
            cmp.max_abs_diff = std::max(cmp.max_abs_diff, std::abs(static_cast<double>(ours[v]) - rec.logits[v]));
        const auto argmax = [](std::span<const float> x) {
            return static_cast<std::size_t>(std::max_element(x.begin(), x.end()) - x.begin());
        };
        cmp.top1_agreements += argmax(ours) == argmax(rec.logits);
        ++cmp.prompts;
    }
    return cmp;
}

}  // namespace bicl
