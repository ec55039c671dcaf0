#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "duvisor/cp/cp_driver.hpp"
#include "duvisor/guest/executor.hpp"
#include "duvisor/guest/isa.hpp"
#include "duvisor/mmu/page_table.hpp"
#include "duvisor/pvio/devices.hpp"
#include "duvisor/sim/kernel.hpp"

namespace duvisor::hv {

class BootError : public ConfigError
{
public:
  using ConfigError::ConfigError;
};

/// Guest RAM always starts at this GPA.
inline constexpr std::uint64_t kRamBase = guest::kCodeBase;
/// The guest keeps its stage-1 page-table pool in the top 2 MiB of RAM.
inline constexpr std::uint64_t kS1PoolBytes = 2ull << 20;
/// HU-mode address of the vthread exit handler (what hu_ehb holds).
inline constexpr hw::Word kExitHandlerPc = 0x7e00'0000'1000ull;
inline constexpr hw::Word kIoThreadPc = 0x7e00'0000'2000ull;

struct DeviceConfig
{
  pvio::DeviceKind kind = pvio::DeviceKind::Console;
  /// vCPU that receives this device's interrupts.
  std::uint32_t irq_vcpu = 0;
  /// GPA of the device's register window; 0 picks the default.
  std::uint64_t mmio_base = 0;
};

struct VmConfig
{
  std::string name = "vm";
  std::uint32_t vcpus = 1;
  std::uint64_t memory = 64ull << 20;
  std::vector<DeviceConfig> devices;
  /// Core of each vCPU's vthread; missing entries default to the vCPU index.
  std::vector<hw::CoreId> vcpu_cores;
  /// Cores of the I/O threads in creation order: net RX, net TX, blk.
  std::vector<hw::CoreId> io_cores;
  std::uint64_t grant_size = 512ull << 20;
  std::uint32_t initial_grants = 1;
  /// Extra grants requested when the allocator runs dry, before OOM.
  std::uint32_t grant_extensions = 1;
  /// Map all of guest RAM at boot instead of on first touch.
  bool premap = false;
  /// Leave DV-Ext off; boot must then refuse to run.
  bool skip_enable_dv = false;
  hw::Word deleg = hw::kDelegValidMask;
  std::vector<pvio::PacketSpec> packets;
  std::vector<std::uint8_t> disk_image;

  std::uint64_t ram_end() const { return kRamBase + memory; }
};

/// Where each interrupt line came from, for latency and attribution.
struct IrqTag
{
  std::uint16_t sender = 0;
  std::uint64_t cycle = 0;
  std::uint32_t insert = sim::kNoLink;

  bool operator==(const IrqTag&) const = default;
};

/// Pending virtual interrupts the vthread has not yet handed to the guest:
/// a 64-line bitmap plus the tag of the first insert on each line.
struct StateArea
{
  hw::Word pending = 0;
  std::array<IrqTag, 64> tags{};

  bool empty() const { return pending == 0; }
};

enum class VcpuStatus : std::uint8_t { Init, InGuest, InHypervisor, Blocked, Halted, Aborted };

std::string_view to_string(VcpuStatus s);

struct VcpuState
{
  std::uint32_t vcpuid = 0;
  hw::CoreId core = 0;
  cp::Tid tid = 0;
  guest::GuestCpu cpu;
  VcpuStatus status = VcpuStatus::Init;
  StateArea state;
  /// Tags of lines handed to the guest and not yet acknowledged.
  std::array<IrqTag, 64> delivered{};
  std::uint64_t exits = 0;
  std::vector<std::uint64_t> ack_latency;
  std::string abort_reason;

  bool runnable() const { return status == VcpuStatus::InGuest; }
};

/// Bump allocator over the process's grants.
class GpaAllocator
{
public:
  void add_grant(const cp::RegionGrant& g) { grants_.push_back(g); }
  /// Next unused host page, or nothing when every grant is used up.
  std::optional<std::uint64_t> next_page();
  std::uint64_t offset() const { return offset_; }
  std::uint64_t total() const;
  const std::vector<cp::RegionGrant>& grants() const { return grants_; }

private:
  std::vector<cp::RegionGrant> grants_;
  std::uint64_t offset_ = 0;
};

class Vthread;
class IoThread;

/// One VM's user-level hypervisor process.
class Hypervisor
{
public:
  /// Called on every stage-2 mapping the fault handler installs; returns the
  /// HPA actually written into the table. Lets tests play a hostile
  /// hypervisor.
  using MapHook = std::function<std::uint64_t(std::uint64_t gpa, std::uint64_t hpa)>;

  Hypervisor(sim::Kernel& kernel, VmConfig cfg, guest::Program program);
  ~Hypervisor();
  Hypervisor(const Hypervisor&) = delete;
  Hypervisor& operator=(const Hypervisor&) = delete;

  /// Creates the process, enables DV-Ext, takes grants, builds the stage-2
  /// table, loads the image, lays out devices and starts the threads.
  void boot();

  const VmConfig& config() const { return cfg_; }
  const guest::Program& program() const { return program_; }
  cp::Pid pid() const { return pid_; }
  hw::Word vmid() const { return vmid_; }
  bool booted() const { return booted_; }
  bool alive() const;
  /// Every vCPU halted or aborted, or the process is gone.
  bool finished() const;
  bool panicked() const { return panicked_; }

  std::size_t vcpu_count() const { return vcpus_.size(); }
  VcpuState& vcpu(std::uint32_t id) { return vcpus_.at(id); }
  const VcpuState& vcpu(std::uint32_t id) const { return vcpus_.at(id); }

  mmu::StageTwoPageTable& s2pt() { return *s2pt_; }
  const GpaAllocator& allocator() const { return alloc_; }
  std::uint64_t driver_area() const { return driver_area_; }
  std::uint64_t s1_pool() const { return cfg_.ram_end() - kS1PoolBytes; }
  const std::vector<pvio::DeviceLayout>& device_layouts() const { return layouts_; }
  const pvio::DeviceLayout* device_layout(pvio::DeviceKind kind) const;

  pvio::NetBackend* net() { return net_.get(); }
  pvio::BlkBackend* blk() { return blk_.get(); }
  pvio::Console* console() { return console_.get(); }

  void set_map_hook(MapHook hook) { map_hook_ = std::move(hook); }

  /// Raises `irq` on vCPU `target` from a thread running on `caller`.
  /// Returns the Insert event index.
  std::uint32_t inject_virq(hw::CoreId caller, std::uint32_t target, unsigned irq, sim::Handler source,
                            std::uint32_t link = sim::kNoLink);

private:
  friend class Vthread;
  friend class IoThread;

  sim::TraceEvent event(sim::EventKind kind, hw::CoreId core, hw::Mode mode) const;
  std::uint64_t alloc_page(hw::CoreId core, std::uint32_t link);
  std::optional<std::uint64_t> take_page(hw::CoreId core, std::uint32_t link);
  /// Maps the page holding `gpa`. Returns false if the guest is out of memory.
  bool map_page(hw::CoreId core, std::uint64_t gpa, std::uint32_t link, bool boot);
  bool in_ram(std::uint64_t gpa) const { return gpa >= kRamBase && gpa < cfg_.ram_end(); }
  void panic(hw::CoreId core, const std::string& why);
  /// Routes a PMC refusal met by hypervisor code on `core` to the kernel.
  void pmc_fault(hw::CoreId core, std::uint64_t hpa);
  pvio::GpaAccess gpa_access(hw::CoreId core);
  /// Handles an MMIO access; returns false if the guest must be aborted.
  bool mmio(hw::CoreId core, VcpuState& v, std::uint64_t gpa, const guest::Instr& in, std::uint32_t link);

  sim::Kernel& k_;
  VmConfig cfg_;
  guest::Program program_;
  cp::Pid pid_ = 0;
  hw::Word vmid_ = 0;
  bool booted_ = false;
  bool panicked_ = false;
  std::uint32_t extensions_used_ = 0;
  GpaAllocator alloc_;
  std::unique_ptr<mmu::StageTwoPageTable> s2pt_;
  std::uint32_t node_link_ = sim::kNoLink;
  hw::CoreId node_core_ = 0;
  std::uint64_t driver_area_ = 0;
  std::vector<pvio::DeviceLayout> layouts_;
  std::unique_ptr<pvio::NetBackend> net_;
  std::unique_ptr<pvio::BlkBackend> blk_;
  std::unique_ptr<pvio::Console> console_;
  std::vector<VcpuState> vcpus_;
  std::vector<std::unique_ptr<Vthread>> vthreads_;
  std::vector<std::unique_ptr<IoThread>> io_threads_;
  MapHook map_hook_;
};

} // namespace duvisor::hv
