#include "microface/tensor.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace microface {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

template <typename Real>
Tensor<Real>::Tensor(Shape shape, Real fill) : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

template <typename Real>
Tensor<Real>::Tensor(Shape shape, std::vector<Real> data) : shape_(std::move(shape)), data_(data.begin(), data.end()) {
  if (shape_numel(shape_) != data_.size()) {
    throw ShapeError("tensor extents " + shape_string(shape_) + " do not match " + std::to_string(data_.size()) +
                     " values");
  }
}

template <typename Real>
Real Tensor<Real>::item() const {
  if (data_.size() != 1) throw ShapeError("item() on tensor of shape " + shape_string(shape_));
  return data_[0];
}

template <typename Real>
Tensor<Real> Tensor<Real>::reshaped(Shape shape) const {
  if (shape_numel(shape) != data_.size()) {
    throw ShapeError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
  }
  Tensor out = *this;
  out.shape_ = std::move(shape);
  return out;
}

template <typename Real>
bool Tensor<Real>::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](Real v) { return std::isfinite(v); });
}

template <typename Real>
void Tensor<Real>::fill(Real value) {
  std::fill(data_.begin(), data_.end(), value);
}

template class Tensor<float>;
template class Tensor<double>;

namespace {

static_assert(std::endian::native == std::endian::little, "MXT1 I/O assumes a little-endian host");

constexpr std::array<char, 4> kMagic{'M', 'X', 'T', '1'};

void put_u32(std::ostream& out, std::uint32_t v) { out.write(reinterpret_cast<const char*>(&v), sizeof v); }

}  // namespace

void write_mxt(std::ostream& out, const Tensor<float>& tensor) {
  out.write(kMagic.data(), kMagic.size());
  put_u32(out, static_cast<std::uint32_t>(tensor.rank()));
  for (auto e : tensor.shape()) put_u32(out, static_cast<std::uint32_t>(e));
  out.write(reinterpret_cast<const char*>(tensor.data()), static_cast<std::streamsize>(tensor.size() * sizeof(float)));
  if (!out) throw IoError("failed writing MXT1 payload");
}

Tensor<float> read_mxt(std::istream& in, const std::string& source) {
  std::array<char, 4> magic{};
  in.read(magic.data(), magic.size());
  if (in.gcount() != 4 || magic != kMagic) throw IoError(source + ": missing MXT1 magic");
  auto get_u32 = [&](const char* what) {
    std::uint32_t v = 0;
    in.read(reinterpret_cast<char*>(&v), sizeof v);
    if (in.gcount() != sizeof v) throw IoError(source + ": truncated MXT1 header (" + what + ")");
    return v;
  };
  const std::uint32_t rank = get_u32("rank");
  if (rank > 8) throw IoError(source + ": implausible MXT1 rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto& e : shape) e = get_u32("extent");
  const std::size_t expected = shape_numel(shape) * sizeof(float);
  std::vector<float> data(shape_numel(shape));
  in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(expected));
  const auto got = static_cast<std::size_t>(in.gcount());
  if (got != expected) {
    throw IoError(source + ": truncated MXT1 payload, expected " + std::to_string(expected) + " bytes, got " +
                  std::to_string(got));
  }
  return Tensor<float>(std::move(shape), std::move(data));
}

void save_mxt(const std::string& path, const Tensor<float>& tensor) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError(path + ": cannot open for writing");
  write_mxt(out, tensor);
}

Tensor<float> load_mxt(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(path + ": cannot open");
  return read_mxt(in, path);
}

std::vector<Tensor<float>> load_mxt_all(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(path + ": cannot open");
  std::vector<Tensor<float>> out;
  while (in.peek() != std::char_traits<char>::eof()) out.push_back(read_mxt(in, path));
  return out;
}

}  // namespace microface
