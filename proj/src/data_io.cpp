#include "itlumm/data_io.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>

#include "itlumm/errors.hpp"

namespace itlumm {

namespace fs = std::filesystem;

namespace {

std::vector<std::uint8_t> gunzip(const std::vector<std::uint8_t>& in, const std::string& what) {
  z_stream zs{};
  if (inflateInit2(&zs, 15 + 32) != Z_OK) throw FormatError(what + ": cannot initialise zlib");
  zs.next_in = const_cast<Bytef*>(in.data());
  zs.avail_in = static_cast<uInt>(in.size());
  std::vector<std::uint8_t> out;
  std::uint8_t buf[1 << 16];
  int rc = Z_OK;
  while (rc != Z_STREAM_END) {
    zs.next_out = buf;
    zs.avail_out = sizeof buf;
    rc = inflate(&zs, Z_NO_FLUSH);
    if (rc != Z_OK && rc != Z_STREAM_END) {
      inflateEnd(&zs);
      throw FormatError(what + ": corrupt gzip stream");
    }
    out.insert(out.end(), buf, buf + (sizeof buf - zs.avail_out));
    if (rc == Z_OK && zs.avail_in == 0 && zs.avail_out != 0) {
      inflateEnd(&zs);
      throw FormatError(what + ": truncated gzip stream");
    }
  }
  inflateEnd(&zs);
  return out;
}

std::uint32_t read_be32(std::span<const std::uint8_t> b, std::size_t at) {
  return (std::uint32_t{b[at]} << 24) | (std::uint32_t{b[at + 1]} << 16) | (std::uint32_t{b[at + 2]} << 8) |
         std::uint32_t{b[at + 3]};
}

std::string hex32(std::uint32_t v) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "0x%08x", v);
  return buf;
}

fs::path find_variant(const fs::path& dir, const std::string& stem) {
  for (const char* suffix : {"", ".gz"}) {
    fs::path p = dir / (stem + suffix);
    if (fs::exists(p)) return p;
  }
  throw FormatError("missing dataset file " + (dir / stem).string() + "[.gz]");
}

}  // namespace

std::vector<std::uint8_t> read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b) return gunzip(bytes, path.string());
  return bytes;
}

LabeledDataset parse_mnist(std::span<const std::uint8_t> images, std::span<const std::uint8_t> labels,
                           const std::string& what) {
  if (images.size() < 16) throw FormatError(what + ": image header needs 16 bytes, got " + std::to_string(images.size()));
  if (labels.size() < 8) throw FormatError(what + ": label header needs 8 bytes, got " + std::to_string(labels.size()));
  if (read_be32(images, 0) != 0x803)
    throw FormatError(what + ": image magic expected 0x00000803, got " + hex32(read_be32(images, 0)));
  if (read_be32(labels, 0) != 0x801)
    throw FormatError(what + ": label magic expected 0x00000801, got " + hex32(read_be32(labels, 0)));
  const std::size_t n = read_be32(images, 4), rows = read_be32(images, 8), cols = read_be32(images, 12);
  const std::size_t nl = read_be32(labels, 4);
  if (n != nl)
    throw FormatError(what + ": " + std::to_string(n) + " images but " + std::to_string(nl) + " labels");
  const std::size_t d = rows * cols;
  if (d == 0) throw FormatError(what + ": zero-sized images");
  const std::size_t want_img = 16 + n * d, want_lbl = 8 + n;
  if (images.size() != want_img)
    throw FormatError(what + ": image file expected " + std::to_string(want_img) + " bytes, got " +
                      std::to_string(images.size()));
  if (labels.size() != want_lbl)
    throw FormatError(what + ": label file expected " + std::to_string(want_lbl) + " bytes, got " +
                      std::to_string(labels.size()));
  LabeledDataset ds;
  ds.num_classes = 10;
  ds.features = Matrix(n, d);
  auto& f = ds.features.data();
  for (std::size_t i = 0; i < n * d; ++i) f[i] = images[16 + i] / 255.0;
  ds.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[8 + i] > 9) throw FormatError(what + ": label " + std::to_string(labels[8 + i]) + " at index " +
                                             std::to_string(i) + " is not a digit");
    ds.labels[i] = labels[8 + i];
  }
  return ds;
}

LabeledDataset load_mnist(const fs::path& images, const fs::path& labels) {
  const auto img = read_bytes(images);
  const auto lbl = read_bytes(labels);
  return parse_mnist(img, lbl, images.string());
}

LabeledDataset load_mnist_split(const fs::path& dir, bool train) {
  const std::string prefix = train ? "train" : "t10k";
  return load_mnist(find_variant(dir, prefix + "-images-idx3-ubyte"), find_variant(dir, prefix + "-labels-idx1-ubyte"));
}

LabeledDataset parse_cifar10(std::span<const std::uint8_t> bytes, const std::string& what) {
  constexpr std::size_t kPixels = 3072, kRecord = kPixels + 1;
  if (bytes.empty() || bytes.size() % kRecord != 0)
    throw FormatError(what + ": size " + std::to_string(bytes.size()) + " is not a positive multiple of " +
                      std::to_string(kRecord) + " bytes");
  const std::size_t n = bytes.size() / kRecord;
  LabeledDataset ds;
  ds.num_classes = 10;
  ds.features = Matrix(n, kPixels);
  ds.labels.resize(n);
  for (std::size_t r = 0; r < n; ++r) {
    const std::uint8_t* rec = bytes.data() + r * kRecord;
    if (rec[0] > 9) throw FormatError(what + ": label " + std::to_string(rec[0]) + " in record " + std::to_string(r));
    ds.labels[r] = rec[0];
    auto row = ds.features.row(r);
    for (std::size_t j = 0; j < kPixels; ++j) row[j] = rec[1 + j] / 255.0;
  }
  return ds;
}

LabeledDataset load_cifar10(std::span<const fs::path> batches) {
  if (batches.empty()) throw ArgumentError("no CIFAR-10 batch files given");
  std::vector<std::uint8_t> all;
  for (const auto& p : batches) {
    auto b = read_bytes(p);
    if (b.size() % 3073 != 0)
      throw FormatError(p.string() + ": size " + std::to_string(b.size()) + " is not a multiple of 3073 bytes");
    all.insert(all.end(), b.begin(), b.end());
  }
  return parse_cifar10(all, batches.front().string());
}

std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths
  std::size_t off = 0;
  while (off < bytes.size()) {
    const std::size_t len = std::min<std::size_t>(bytes.size() - off, 1u << 30);
    crc = crc32(crc, bytes.data() + off, static_cast<uInt>(len));
    off += len;
  }
  return static_cast<std::uint32_t>(crc);
}

// ---------------------------------------------------------------- model archive

namespace {

enum Section : std::uint32_t { kMetadata = 1, kDense = 2, kAmm = 3 };
enum EncoderTag : std::uint8_t { kTree = 0, kPq = 1 };

class Writer {
 public:
  void u8(std::uint8_t v) { out.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void str(const std::string& s) {
    u64(s.size());
    out.insert(out.end(), s.begin(), s.end());
  }
  void doubles(std::span<const double> v) {
    u64(v.size());
    for (double x : v) f64(x);
  }
  void sizes(std::span<const std::size_t> v) {
    u64(v.size());
    for (std::size_t x : v) u64(x);
  }
  void matrix(const Matrix& m) {
    u64(m.rows());
    u64(m.cols());
    for (double x : m.data()) f64(x);
  }

  std::vector<std::uint8_t> out;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> b) : b_(b) {}

  std::size_t remaining() const { return b_.size() - pos_; }
  void need(std::size_t n) const {
    if (remaining() < n)
      throw FormatError("model archive truncated: needed " + std::to_string(n) + " bytes at offset " +
                        std::to_string(pos_) + ", " + std::to_string(remaining()) + " left");
  }
  std::uint8_t u8() {
    need(1);
    return b_[pos_++];
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t{b_[pos_++]} << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t{b_[pos_++]} << (8 * i);
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  // element counts are checked against the bytes left before allocating
  std::size_t count(std::size_t elem_bytes) {
    const std::uint64_t n = u64();
    if (elem_bytes > 0 && n > remaining() / elem_bytes)
      throw FormatError("model archive: element count " + std::to_string(n) + " exceeds the remaining data");
    return static_cast<std::size_t>(n);
  }
  std::string str() {
    const std::size_t n = count(1);
    std::string s(reinterpret_cast<const char*>(b_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::vector<double> doubles() {
    std::vector<double> v(count(8));
    for (double& x : v) x = f64();
    return v;
  }
  std::vector<std::size_t> sizes() {
    std::vector<std::size_t> v(count(8));
    for (auto& x : v) x = static_cast<std::size_t>(u64());
    return v;
  }
  Matrix matrix() {
    const std::uint64_t r = u64(), c = u64();
    if (c != 0 && r > remaining() / 8 / c) throw FormatError("model archive: matrix larger than the remaining data");
    Matrix m(static_cast<std::size_t>(r), static_cast<std::size_t>(c));
    for (double& x : m.data()) x = f64();
    return m;
  }
  std::span<const std::uint8_t> take(std::size_t n) {
    need(n);
    auto s = b_.subspan(pos_, n);
    pos_ += n;
    return s;
  }

 private:
  std::span<const std::uint8_t> b_;
  std::size_t pos_ = 0;
};

Activation activation_from(std::uint32_t v) {
  if (v > static_cast<std::uint32_t>(Activation::softmax))
    throw FormatError("model archive: unknown activation code " + std::to_string(v));
  return static_cast<Activation>(v);
}

void write_amm(Writer& w, const AmmOperator& op) {
  w.u32(static_cast<std::uint32_t>(op.nonlinearity));
  w.sizes(op.spec.perm);
  w.sizes(op.spec.boundaries);
  w.u64(op.encoders.size());
  for (const auto& enc : op.encoders) {
    if (const auto* tree = std::get_if<HashTree>(&enc)) {
      w.u8(kTree);
      for (std::size_t lvl = 0; lvl < kTreeLevels; ++lvl) {
        w.u64(tree->split_dim[lvl]);
        w.doubles(tree->thresholds[lvl]);
      }
    } else {
      w.u8(kPq);
      w.matrix(std::get<PqEncoder>(enc).prototypes);
    }
  }
  w.matrix(op.table.t);
  w.u8(op.table.quantized ? 1 : 0);
  if (op.table.quantized) {
    const auto& q = *op.table.quantized;
    w.u64(q.q.size());
    w.out.insert(w.out.end(), q.q.begin(), q.q.end());
    w.doubles(q.scale);
    w.doubles(q.offset);
  }
  w.doubles(op.bias);
}

AmmOperator read_amm(Reader& r) {
  AmmOperator op;
  op.nonlinearity = activation_from(r.u32());
  op.spec.perm = r.sizes();
  op.spec.boundaries = r.sizes();
  const std::size_t n_enc = r.count(1);
  for (std::size_t i = 0; i < n_enc; ++i) {
    const std::uint8_t tag = r.u8();
    if (tag == kTree) {
      HashTree tree;
      for (std::size_t lvl = 0; lvl < kTreeLevels; ++lvl) {
        tree.split_dim[lvl] = static_cast<std::size_t>(r.u64());
        tree.thresholds[lvl] = r.doubles();
      }
      op.encoders.emplace_back(std::move(tree));
    } else if (tag == kPq) {
      op.encoders.emplace_back(PqEncoder{r.matrix()});
    } else {
      throw FormatError("model archive: unknown encoder tag " + std::to_string(tag));
    }
  }
  op.table.t = r.matrix();
  const std::uint8_t has_q = r.u8();
  if (has_q > 1) throw FormatError("model archive: bad quantization flag");
  if (has_q) {
    QuantizedTable q;
    const std::size_t n = r.count(1);
    auto bytes = r.take(n);
    q.q.assign(bytes.begin(), bytes.end());
    q.scale = r.doubles();
    q.offset = r.doubles();
    op.table.quantized = std::move(q);
  }
  op.bias = r.doubles();
  try {
    op.validate();
  } catch (const Error& e) {
    throw FormatError(std::string("model archive: inconsistent AMM layer: ") + e.what());
  }
  return op;
}

}  // namespace

std::vector<std::uint8_t> serialize_model(const MlpModel& model) {
  Writer w;
  w.out = {'I', 'T', 'L', 'M'};
  w.u32(kModelFormatVersion);

  auto section = [&w](std::uint32_t type, const Writer& body) {
    w.u32(type);
    w.u64(body.out.size());
    w.out.insert(w.out.end(), body.out.begin(), body.out.end());
  };

  Writer meta;
  meta.u64(model.seed);
  meta.u64(model.metadata.size());
  for (const auto& [k, v] : model.metadata) {
    meta.str(k);
    meta.str(v);
  }
  section(kMetadata, meta);

  for (const Layer& layer : model.layers) {
    Writer body;
    if (const auto* d = std::get_if<DenseLayer>(&layer)) {
      body.u32(static_cast<std::uint32_t>(d->activation));
      body.matrix(d->weights);
      body.doubles(d->bias);
      section(kDense, body);
    } else {
      write_amm(body, std::get<AmmOperator>(layer));
      section(kAmm, body);
    }
  }
  w.u32(crc32_of(w.out));
  return std::move(w.out);
}

MlpModel deserialize_model(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 12) throw FormatError("model archive too short (" + std::to_string(bytes.size()) + " bytes)");
  if (std::memcmp(bytes.data(), "ITLM", 4) != 0) throw FormatError("not a model archive (bad magic)");
  const auto payload = bytes.first(bytes.size() - 4);
  Reader tail(bytes.last(4));
  const std::uint32_t stored = tail.u32();
  Reader r(payload);
  r.take(4);
  const std::uint32_t version = r.u32();
  if (version != kModelFormatVersion)
    throw FormatError("unsupported model format version " + std::to_string(version) + " (expected " +
                      std::to_string(kModelFormatVersion) + ")");
  if (crc32_of(payload) != stored) throw FormatError("model archive checksum mismatch");

  MlpModel model;
  bool have_meta = false;
  while (r.remaining() > 0) {
    const std::uint32_t type = r.u32();
    const std::uint64_t len = r.u64();
    if (len > r.remaining()) throw FormatError("model archive: section length exceeds the file");
    Reader body(r.take(static_cast<std::size_t>(len)));
    switch (type) {
      case kMetadata: {
        if (have_meta) throw FormatError("model archive: duplicate metadata section");
        have_meta = true;
        model.seed = body.u64();
        const std::size_t n = body.count(16);
        for (std::size_t i = 0; i < n; ++i) {
          std::string k = body.str();
          model.metadata[std::move(k)] = body.str();
        }
        break;
      }
      case kDense: {
        DenseLayer d;
        d.activation = activation_from(body.u32());
        d.weights = body.matrix();
        d.bias = body.doubles();
        model.layers.emplace_back(std::move(d));
        break;
      }
      case kAmm: model.layers.emplace_back(read_amm(body)); break;
      default:
        throw FormatError("unsupported section type " + std::to_string(type) + " for model format version " +
                          std::to_string(version));
    }
    if (body.remaining() != 0) throw FormatError("model archive: trailing bytes in section type " + std::to_string(type));
  }
  if (!have_meta) throw FormatError("model archive: missing metadata section");
  try {
    model.validate();
  } catch (const Error& e) {
    throw FormatError(std::string("model archive: invalid model: ") + e.what());
  }
  return model;
}

void save_model(const MlpModel& model, const fs::path& path) {
  const auto bytes = serialize_model(model);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("write failed for " + path.string());
}

MlpModel load_model(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_model(bytes);
}

}  // namespace itlumm
