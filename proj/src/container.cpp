#include "diffattn/container.hpp"

#include <array>
#include <bit>
#include <cmath>
#include <fstream>
#include <iterator>
#include <limits>

#include "diffattn/error.hpp"
#include "diffattn/metrics.hpp"

namespace diffattn {

namespace {

constexpr std::array<std::uint8_t, 4> kMagic = {'D', 'F', 'A', '1'};
constexpr std::size_t kHeaderSize = 4 + 4 + 4 + 8;

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint64_t get_le(std::span<const std::uint8_t> b, std::size_t at, int width) {
  std::uint64_t v = 0;
  for (int i = 0; i < width; ++i) v |= static_cast<std::uint64_t>(b[at + i]) << (8 * i);
  return v;
}

[[noreturn]] void fail(IoError::Kind kind, const std::string& msg) { throw IoError(kind, msg); }

class Cursor {
 public:
  explicit Cursor(std::span<const std::uint8_t> payload) : b_(payload) {}

  bool done() const { return pos_ == b_.size(); }

  Tensor tensor() {
    Tensor t;
    const auto ndim = static_cast<std::uint32_t>(take(4));
    if (ndim > 8) fail(IoError::Kind::Malformed, "tensor rank " + std::to_string(ndim) + " too large");
    std::uint64_t count = 1;
    for (std::uint32_t i = 0; i < ndim; ++i) {
      t.shape.push_back(static_cast<std::uint32_t>(take(4)));
      count *= t.shape.back();
    }
    if (count > (b_.size() - pos_) / 8) {
      fail(IoError::Kind::Malformed, "tensor of " + std::to_string(count) +
                                         " values overruns the payload");
    }
    t.values.resize(count);
    for (double& v : t.values) v = std::bit_cast<double>(take(8));
    return t;
  }

 private:
  std::uint64_t take(int width) {
    if (b_.size() - pos_ < static_cast<std::size_t>(width)) {
      fail(IoError::Kind::Malformed, "tensor header overruns the payload");
    }
    const std::uint64_t v = get_le(b_, pos_, width);
    pos_ += static_cast<std::size_t>(width);
    return v;
  }

  std::span<const std::uint8_t> b_;
  std::size_t pos_ = 0;
};

std::string shape_string(const std::vector<std::uint32_t>& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out + "]";
}

void expect_shape(const Tensor& t, const std::vector<std::uint32_t>& shape, const char* what) {
  if (t.shape != shape) {
    fail(IoError::Kind::ShapeMismatch, std::string(what) + ": expected shape " +
                                           shape_string(shape) + ", found " +
                                           shape_string(t.shape));
  }
}

std::uint32_t to_u32(double v, const char* what) {
  if (!(v >= 0.0 && v <= std::numeric_limits<std::uint32_t>::max()) || std::floor(v) != v) {
    fail(IoError::Kind::Malformed, std::string(what) + " holds a non-integer value");
  }
  return static_cast<std::uint32_t>(v);
}

std::uint32_t u32(std::size_t v) {
  if (v > std::numeric_limits<std::uint32_t>::max()) {
    throw DomainError("dimension " + std::to_string(v) + " does not fit the container");
  }
  return static_cast<std::uint32_t>(v);
}

Tensor index_tensor(const auto& values) {
  Tensor t;
  t.shape = {u32(values.size())};
  for (auto v : values) t.values.push_back(static_cast<double>(v));
  return t;
}

Tensor seed_tensor(std::uint64_t seed) {
  return Tensor{{2}, {static_cast<double>(seed & 0xffffffffULL), static_cast<double>(seed >> 32)}};
}

std::uint64_t seed_from(const Tensor& t) {
  expect_shape(t, {2}, "seed");
  return static_cast<std::uint64_t>(to_u32(t.values[0], "seed")) |
         (static_cast<std::uint64_t>(to_u32(t.values[1], "seed")) << 32);
}

Matrix matrix_of(const Tensor& t, std::size_t rows, std::size_t cols, const char* what) {
  expect_shape(t, {u32(rows), u32(cols)}, what);
  return t.to_matrix();
}

void require_count(const std::vector<Tensor>& ts, std::size_t n, RecordType type) {
  if (ts.size() != n) {
    fail(IoError::Kind::Malformed, std::string(to_string(type)) + " record holds " +
                                       std::to_string(ts.size()) + " tensors, expected " +
                                       std::to_string(n));
  }
}

// Runs a reconstruction step, reporting validation failures as malformed input.
template <typename F>
auto rebuild(const char* what, F&& f) {
  try {
    return f();
  } catch (const std::invalid_argument& e) {
    fail(IoError::Kind::Malformed, std::string(what) + ": " + e.what());
  }
}

}  // namespace

std::string_view to_string(RecordType t) {
  switch (t) {
    case RecordType::Dataset: return "dataset";
    case RecordType::Index: return "index";
    case RecordType::Params: return "params";
    case RecordType::AttentionMaps: return "attention-maps";
  }
  return "unknown";
}

Tensor Tensor::from(const Matrix& m) {
  return Tensor{{u32(m.rows()), u32(m.cols())}, m.data()};
}

Tensor Tensor::vector(std::span<const double> v) {
  return Tensor{{u32(v.size())}, Vector(v.begin(), v.end())};
}

Matrix Tensor::to_matrix() const {
  if (shape.size() == 1) return Matrix(1, shape[0], values);
  if (shape.size() == 2) return Matrix(shape[0], shape[1], values);
  fail(IoError::Kind::ShapeMismatch, "expected a matrix, found shape " + shape_string(shape));
}

std::size_t Tensor::element_count() const {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::vector<std::uint8_t> encode_record(RecordType type, const std::vector<Tensor>& tensors) {
  std::vector<std::uint8_t> payload;
  for (const auto& t : tensors) {
    if (t.element_count() != t.values.size()) {
      throw ShapeError("tensor shape " + shape_string(t.shape) + " does not match its " +
                       std::to_string(t.values.size()) + " values");
    }
    put_u32(payload, u32(t.shape.size()));
    for (auto d : t.shape) put_u32(payload, d);
    for (double v : t.values) put_u64(payload, std::bit_cast<std::uint64_t>(v));
  }
  std::vector<std::uint8_t> out(kMagic.begin(), kMagic.end());
  put_u32(out, kContainerVersion);
  put_u32(out, static_cast<std::uint32_t>(type));
  put_u64(out, payload.size());
  out.insert(out.end(), payload.begin(), payload.end());
  return out;
}

RecordType record_type(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kHeaderSize) {
    fail(IoError::Kind::Truncated, "truncated header: expected " + std::to_string(kHeaderSize) +
                                       " bytes, got " + std::to_string(bytes.size()));
  }
  if (!std::equal(kMagic.begin(), kMagic.end(), bytes.begin())) {
    fail(IoError::Kind::BadMagic, "not a DFA1 container (bad magic)");
  }
  const auto version = static_cast<std::uint32_t>(get_le(bytes, 4, 4));
  if (version != kContainerVersion) {
    fail(IoError::Kind::BadVersion, "unsupported container version " + std::to_string(version));
  }
  const auto tag = static_cast<std::uint32_t>(get_le(bytes, 8, 4));
  if (tag < 1 || tag > 4) fail(IoError::Kind::Malformed, "unknown record type " + std::to_string(tag));
  return static_cast<RecordType>(tag);
}

std::vector<Tensor> decode_record(std::span<const std::uint8_t> bytes, RecordType expected) {
  const RecordType type = record_type(bytes);
  if (type != expected) {
    fail(IoError::Kind::WrongRecord, "expected a " + std::string(to_string(expected)) +
                                         " record, found " + std::string(to_string(type)));
  }
  const std::uint64_t length = get_le(bytes, 12, 8);
  const std::size_t actual = bytes.size() - kHeaderSize;
  if (actual < length) {
    fail(IoError::Kind::Truncated, "truncated payload: expected " + std::to_string(length) +
                                       " bytes, got " + std::to_string(actual));
  }
  if (actual > length) {
    fail(IoError::Kind::Malformed, std::to_string(actual - length) + " trailing bytes after payload");
  }
  Cursor cur(bytes.subspan(kHeaderSize));
  std::vector<Tensor> out;
  while (!cur.done()) out.push_back(cur.tensor());
  return out;
}

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(IoError::Kind::Open, "cannot open '" + path.string() + "' for reading");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(IoError::Kind::Open, "cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(IoError::Kind::Open, "write to '" + path.string() + "' failed");
}

// ---- dataset ----

std::vector<std::uint8_t> encode(const Dataset& ds) {
  ds.validate();
  const auto& h = ds.header;
  const std::size_t n = ds.size();
  std::vector<Tensor> ts;
  ts.push_back(index_tensor(std::vector<std::size_t>{h.regions, h.dim, h.embed_dim, h.classes,
                                                     h.concepts, h.grid_rows, h.grid_cols,
                                                     h.n_clusters, n}));
  ts.push_back(index_tensor(ds.truth.centers));
  ts.push_back(Tensor::from(ds.truth.objects));
  ts.push_back(Tensor::from(ds.truth.questions));
  ts.push_back(Tensor::from(ds.truth.joints));
  ts.push_back(Tensor::from(ds.truth.answers));

  Tensor ids{{u32(n)}, {}}, answers{{u32(n)}, {}}, concepts{{u32(n)}, {}};
  Tensor images{{u32(n), u32(h.regions), u32(h.dim)}, {}};
  Tensor questions{{u32(n), u32(h.dim)}, {}}, joints{{u32(n), u32(h.embed_dim)}, {}};
  Tensor has_ref{{u32(n)}, {}}, refs{{u32(n), u32(h.regions)}, {}};
  Tensor annotations{{u32(n), u32(kAnnotatorsPerQuestion)}, {}};
  for (const auto& it : ds.items) {
    ids.values.push_back(it.id);
    answers.values.push_back(it.answer);
    concepts.values.push_back(it.concept_id);
    images.values.insert(images.values.end(), it.image.data().begin(), it.image.data().end());
    questions.values.insert(questions.values.end(), it.question.begin(), it.question.end());
    joints.values.insert(joints.values.end(), it.joint.begin(), it.joint.end());
    has_ref.values.push_back(it.reference ? 1.0 : 0.0);
    if (it.reference) {
      refs.values.insert(refs.values.end(), it.reference->begin(), it.reference->end());
    } else {
      refs.values.insert(refs.values.end(), h.regions, 0.0);
    }
    for (auto a : it.annotations) annotations.values.push_back(a);
  }
  for (auto* t : {&ids, &answers, &concepts, &images, &questions, &joints, &has_ref, &refs,
                  &annotations}) {
    ts.push_back(std::move(*t));
  }
  return encode_record(RecordType::Dataset, ts);
}

Dataset decode_dataset(std::span<const std::uint8_t> bytes) {
  const auto ts = decode_record(bytes, RecordType::Dataset);
  require_count(ts, 15, RecordType::Dataset);
  expect_shape(ts[0], {9}, "dataset header");
  std::array<std::size_t, 9> hv{};
  for (std::size_t i = 0; i < 9; ++i) hv[i] = to_u32(ts[0].values[i], "dataset header");
  Dataset ds;
  auto& h = ds.header;
  h = {hv[0], hv[1], hv[2], hv[3], hv[4], hv[5], hv[6], hv[7]};
  const std::size_t n = hv[8];
  const std::size_t R = h.regions, D = h.dim, E = h.embed_dim;
  if (h.grid_rows * h.grid_cols != R) {
    fail(IoError::Kind::ShapeMismatch, "dataset grid does not cover its regions");
  }

  expect_shape(ts[1], {u32(h.concepts)}, "concept centers");
  for (double v : ts[1].values) ds.truth.centers.push_back(to_u32(v, "concept centers"));
  ds.truth.objects = matrix_of(ts[2], h.concepts, D, "concept objects");
  ds.truth.questions = matrix_of(ts[3], h.concepts, D, "concept questions");
  ds.truth.joints = matrix_of(ts[4], h.concepts, E, "concept joints");
  ds.truth.answers = matrix_of(ts[5], h.classes, D, "answer prototypes");

  const auto N = u32(n);
  expect_shape(ts[6], {N}, "item ids");
  expect_shape(ts[7], {N}, "item answers");
  expect_shape(ts[8], {N}, "item concepts");
  expect_shape(ts[9], {N, u32(R), u32(D)}, "item images");
  expect_shape(ts[10], {N, u32(D)}, "item questions");
  expect_shape(ts[11], {N, u32(E)}, "item joints");
  expect_shape(ts[12], {N}, "reference flags");
  expect_shape(ts[13], {N, u32(R)}, "references");
  expect_shape(ts[14], {N, u32(kAnnotatorsPerQuestion)}, "annotations");

  ds.items.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto& it = ds.items[i];
    it.id = to_u32(ts[6].values[i], "item ids");
    it.answer = to_u32(ts[7].values[i], "item answers");
    it.concept_id = to_u32(ts[8].values[i], "item concepts");
    const auto img = ts[9].values.begin() + static_cast<std::ptrdiff_t>(i * R * D);
    it.image = Matrix(R, D, Vector(img, img + static_cast<std::ptrdiff_t>(R * D)));
    const auto q = ts[10].values.begin() + static_cast<std::ptrdiff_t>(i * D);
    it.question.assign(q, q + static_cast<std::ptrdiff_t>(D));
    const auto j = ts[11].values.begin() + static_cast<std::ptrdiff_t>(i * E);
    it.joint.assign(j, j + static_cast<std::ptrdiff_t>(E));
    if (to_u32(ts[12].values[i], "reference flags") != 0) {
      const auto r = ts[13].values.begin() + static_cast<std::ptrdiff_t>(i * R);
      it.reference = Vector(r, r + static_cast<std::ptrdiff_t>(R));
    }
    for (std::size_t a = 0; a < kAnnotatorsPerQuestion; ++a) {
      it.annotations[a] = to_u32(ts[14].values[i * kAnnotatorsPerQuestion + a], "annotations");
    }
  }
  rebuild("dataset", [&] {
    ds.validate();
    return 0;
  });
  return ds;
}

// ---- exemplar index ----

std::vector<std::uint8_t> encode(const ExemplarIndex& index) {
  const auto& kd = index.kd;
  std::vector<Tensor> ts;
  ts.push_back(seed_tensor(index.seed));
  ts.push_back(Tensor::from(kd.store().embeddings));
  ts.push_back(index_tensor(kd.store().ids));
  ts.push_back(index_tensor(kd.order()));
  Tensor nodes{{u32(kd.nodes().size()), 6}, {}};
  for (const auto& nd : kd.nodes()) {
    nodes.values.insert(nodes.values.end(),
                        {static_cast<double>(nd.begin), static_cast<double>(nd.end),
                         static_cast<double>(nd.left), static_cast<double>(nd.right),
                         static_cast<double>(nd.split_dim), nd.split_value});
  }
  ts.push_back(std::move(nodes));
  ts.push_back(Tensor::from(index.clusters.centroids));
  ts.push_back(index_tensor(index.clusters.assignment));
  return encode_record(RecordType::Index, ts);
}

ExemplarIndex decode_index(std::span<const std::uint8_t> bytes) {
  const auto ts = decode_record(bytes, RecordType::Index);
  require_count(ts, 7, RecordType::Index);
  ExemplarIndex out;
  out.seed = seed_from(ts[0]);
  if (ts[1].shape.size() != 2) fail(IoError::Kind::ShapeMismatch, "embeddings must be a matrix");
  EmbeddingStore store;
  store.embeddings = ts[1].to_matrix();
  const auto n = u32(store.embeddings.rows());
  expect_shape(ts[2], {n}, "index ids");
  for (double v : ts[2].values) store.ids.push_back(to_u32(v, "index ids"));
  expect_shape(ts[3], {n}, "tree order");
  std::vector<std::uint32_t> order;
  for (double v : ts[3].values) order.push_back(to_u32(v, "tree order"));
  if (ts[4].shape.size() != 2 || ts[4].shape[1] != 6) {
    fail(IoError::Kind::ShapeMismatch, "tree nodes: expected shape [m,6], found " +
                                           shape_string(ts[4].shape));
  }
  std::vector<KdIndex::Node> nodes(ts[4].shape[0]);
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    const double* v = ts[4].values.data() + i * 6;
    auto child = [&](double x) {
      if (x == -1.0) return std::int32_t{-1};
      return static_cast<std::int32_t>(to_u32(x, "tree nodes"));
    };
    nodes[i] = {to_u32(v[0], "tree nodes"), to_u32(v[1], "tree nodes"), child(v[2]), child(v[3]),
                to_u32(v[4], "tree nodes"), v[5]};
  }
  if (ts[5].shape.size() != 2 || ts[5].shape[1] != store.embeddings.cols()) {
    fail(IoError::Kind::ShapeMismatch, "centroids do not match the embedding dimension");
  }
  out.clusters.centroids = ts[5].to_matrix();
  expect_shape(ts[6], {n}, "cluster assignment");
  for (double v : ts[6].values) {
    const auto c = to_u32(v, "cluster assignment");
    if (c >= out.clusters.centroids.rows()) {
      fail(IoError::Kind::Malformed, "cluster assignment out of range");
    }
    out.clusters.assignment.push_back(c);
  }
  out.clusters.ids = store.ids;
  out.clusters.rebuild_members();
  out.kd = rebuild("index", [&] {
    return KdIndex::from_parts(std::move(store), std::move(order), std::move(nodes));
  });
  return out;
}

// ---- model parameters ----

std::vector<std::uint8_t> encode(const ModelParams& params) {
  std::vector<Tensor> ts;
  ts.push_back(Tensor{{4},
                      {static_cast<double>(params.kind), static_cast<double>(params.dcn.mode),
                       static_cast<double>(params.dcn.variant),
                       static_cast<double>(params.dcn.scaling)}});
  params.for_each_block([&](const char*, const Matrix& m, bool) { ts.push_back(Tensor::from(m)); });
  return encode_record(RecordType::Params, ts);
}

ModelParams decode_params(std::span<const std::uint8_t> bytes) {
  const auto ts = decode_record(bytes, RecordType::Params);
  if (ts.empty()) fail(IoError::Kind::Malformed, "params record is empty");
  expect_shape(ts[0], {4}, "params meta");
  const auto kind = to_u32(ts[0].values[0], "params meta");
  const auto mode = to_u32(ts[0].values[1], "params meta");
  const auto variant = to_u32(ts[0].values[2], "params meta");
  const auto scaling = to_u32(ts[0].values[3], "params meta");
  if (kind > 5 || mode > 1 || variant > 1 || scaling > 2) {
    fail(IoError::Kind::Malformed, "params meta holds an unknown model tag");
  }
  ModelParams p;
  p.kind = static_cast<ModelKind>(kind);
  p.dcn.mode = static_cast<DcnMode>(mode);
  p.dcn.variant = static_cast<DcnVariant>(variant);
  p.dcn.scaling = static_cast<DcnScaling>(scaling);
  require_count(ts, is_dcn(p.kind) ? 10 : 8, RecordType::Params);
  std::size_t i = 1;
  p.for_each_block([&](const char* name, Matrix& m, bool) {
    if (ts[i].shape.size() != 2) {
      fail(IoError::Kind::ShapeMismatch, std::string(name) + " must be a matrix");
    }
    m = ts[i++].to_matrix();
  });

  const std::size_t D = p.attention.w_image.rows();
  const std::size_t C = p.answer.w_answer.cols();
  try {
    check_attention_shapes(p.attention);
  } catch (const ShapeError& e) {
    fail(IoError::Kind::ShapeMismatch, e.what());
  }
  if (p.answer.w_answer.rows() != D || p.answer.b_answer.rows() != 1 ||
      p.answer.b_answer.cols() != C) {
    fail(IoError::Kind::ShapeMismatch, "answer head does not match the feature dimension");
  }
  if (is_dcn(p.kind)) {
    const Matrix& w1 = p.dcn.w_support;
    const bool ok = w1.rows() == p.dcn.w_oppose.rows() && w1.cols() == p.dcn.w_oppose.cols() &&
                    ((p.dcn.scaling == DcnScaling::Scalar && w1.size() == 1) ||
                     (p.dcn.scaling == DcnScaling::Diagonal && w1.rows() == 1) ||
                     (p.dcn.scaling == DcnScaling::Full && w1.rows() == w1.cols()));
    if (!ok) fail(IoError::Kind::ShapeMismatch, "DCN scalings do not match their declared kind");
  }
  return p;
}

// ---- attention maps ----

std::vector<std::uint8_t> encode(const AttentionMaps& maps) {
  if (maps.grid_rows * maps.grid_cols != maps.maps.cols()) {
    throw ShapeError("attention maps of width " + std::to_string(maps.maps.cols()) +
                     " do not fit a " + std::to_string(maps.grid_rows) + "x" +
                     std::to_string(maps.grid_cols) + " grid");
  }
  return encode_record(RecordType::AttentionMaps,
                       {index_tensor(std::vector<std::size_t>{maps.grid_rows, maps.grid_cols}),
                        Tensor::from(maps.maps)});
}

AttentionMaps decode_maps(std::span<const std::uint8_t> bytes) {
  const auto ts = decode_record(bytes, RecordType::AttentionMaps);
  require_count(ts, 2, RecordType::AttentionMaps);
  expect_shape(ts[0], {2}, "map grid");
  AttentionMaps out;
  out.grid_rows = to_u32(ts[0].values[0], "map grid");
  out.grid_cols = to_u32(ts[0].values[1], "map grid");
  if (ts[1].shape.size() != 2) fail(IoError::Kind::ShapeMismatch, "maps must be a matrix");
  out.maps = ts[1].to_matrix();
  if (out.grid_rows * out.grid_cols != out.maps.cols()) {
    fail(IoError::Kind::ShapeMismatch, "maps do not fit their grid");
  }
  return out;
}

}  // namespace diffattn
