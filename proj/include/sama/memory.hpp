#pragma once

// Byte accounting for tensor buffers. Every Tensor allocates through
// CountingAllocator, so live/peak numbers reflect algorithmic memory only.

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <memory>

namespace sama::memory {

namespace detail {
inline std::atomic<std::int64_t> live{0};
inline std::atomic<std::int64_t> peak{0};
}  // namespace detail

inline void note_alloc(std::size_t bytes) noexcept {
  const auto now = detail::live.fetch_add(static_cast<std::int64_t>(bytes)) +
                   static_cast<std::int64_t>(bytes);
  auto seen = detail::peak.load();
  while (now > seen && !detail::peak.compare_exchange_weak(seen, now)) {
  }
}

inline void note_free(std::size_t bytes) noexcept {
  detail::live.fetch_sub(static_cast<std::int64_t>(bytes));
}

inline std::size_t live_bytes() noexcept {
  return static_cast<std::size_t>(detail::live.load());
}

inline std::size_t peak_bytes() noexcept {
  return static_cast<std::size_t>(detail::peak.load());
}

/// Restart the high-water mark from the bytes currently live.
inline void reset_peak() noexcept { detail::peak.store(detail::live.load()); }

template <class T>
struct CountingAllocator {
  using value_type = T;

  CountingAllocator() noexcept = default;
  template <class U>
  CountingAllocator(const CountingAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) {
    T* p = std::allocator<T>{}.allocate(n);
    note_alloc(n * sizeof(T));
    return p;
  }

  void deallocate(T* p, std::size_t n) noexcept {
    note_free(n * sizeof(T));
    std::allocator<T>{}.deallocate(p, n);
  }

  template <class U>
  bool operator==(const CountingAllocator<U>&) const noexcept {
    return true;
  }
};

}  // namespace sama::memory
