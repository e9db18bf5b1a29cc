#include "malimg/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

#include "malimg/error.hpp"

namespace malimg {

static_assert(std::endian::native == std::endian::little, "checkpoints are written in host order");

namespace {

template <typename T>
void put(std::string& out, T value) {
    char buf[sizeof(T)];
    std::memcpy(buf, &value, sizeof(T));
    out.append(buf, sizeof(T));
}

class Reader {
public:
    Reader(std::string data, std::string origin) : data_(std::move(data)), origin_(std::move(origin)) {}

    template <typename T>
    T get() {
        T value;
        std::memcpy(&value, take(sizeof(T)), sizeof(T));
        return value;
    }

    const char* take(std::size_t n) {
        if (pos_ + n > data_.size()) throw Error(ErrorKind::Io, "checkpoint '" + origin_ + "' is truncated");
        const char* p = data_.data() + pos_;
        pos_ += n;
        return p;
    }

    bool done() const { return pos_ == data_.size(); }

private:
    std::string data_;
    std::string origin_;
    std::size_t pos_ = 0;
};

}  // namespace

void write_file_atomic(const std::filesystem::path& path, const std::string& content) {
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        out.write(content.data(), static_cast<std::streamsize>(content.size()));
        out.flush();
        if (!out) {
            std::error_code ec;
            std::filesystem::remove(tmp, ec);
            throw Error(ErrorKind::Io, "failed writing '" + path.string() + "' (disk full or unwritable?)");
        }
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw Error(ErrorKind::Io, "cannot move '" + tmp.string() + "' into place: " + ec.message());
}

void write_tensor_container(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors) {
    std::string out;
    out.append("MCKP", 4);
    put<std::uint32_t>(out, 1);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
    for (const auto& t : tensors) {
        put<std::uint32_t>(out, static_cast<std::uint32_t>(t.name.size()));
        out += t.name;
        put<std::uint32_t>(out, static_cast<std::uint32_t>(t.tensor.shape.size()));
        for (auto d : t.tensor.shape) put<std::uint64_t>(out, d);
        for (auto v : t.tensor.values) put<float>(out, static_cast<float>(v));
    }
    write_file_atomic(path, out);
}

std::vector<NamedTensor> read_tensor_container(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorKind::MissingFile, "cannot open checkpoint '" + path.string() + "'");
    std::ostringstream buf;
    buf << in.rdbuf();
    Reader r(buf.str(), path.string());

    if (std::memcmp(r.take(4), "MCKP", 4) != 0) throw Error(ErrorKind::Io, "'" + path.string() + "' is not a checkpoint");
    if (const auto version = r.get<std::uint32_t>(); version != 1) {
        throw Error(ErrorKind::Io, "unsupported checkpoint version " + std::to_string(version));
    }
    const auto count = r.get<std::uint32_t>();
    std::vector<NamedTensor> tensors;
    tensors.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        NamedTensor t;
        const auto name_len = r.get<std::uint32_t>();
        t.name.assign(r.take(name_len), name_len);
        const auto rank = r.get<std::uint32_t>();
        for (std::uint32_t d = 0; d < rank; ++d) t.tensor.shape.push_back(r.get<std::uint64_t>());
        t.tensor.values.resize(Tensor::numel(t.tensor.shape));
        for (auto& v : t.tensor.values) v = static_cast<Real>(r.get<float>());
        tensors.push_back(std::move(t));
    }
    if (!r.done()) throw Error(ErrorKind::Io, "trailing bytes in checkpoint '" + path.string() + "'");
    return tensors;
}

std::filesystem::path sidecar_path(const std::filesystem::path& checkpoint) {
    auto p = checkpoint;
    p += ".json";
    return p;
}

nlohmann::json read_json_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorKind::MissingFile, "cannot open '" + path.string() + "'");
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::BadConfig, "malformed JSON in '" + path.string() + "': " + e.what());
    }
}

}  // namespace malimg
